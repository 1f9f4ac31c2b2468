use std::sync::Arc;

use super::{nonlocal::KernelSpec, same_grid, Grid};
use crate::error::{invalid, Result, SavError};

const SIGN_TOL: f64 = 1e-12;

/// Sign constraint attached to an operator symbol and checked on construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolSign {
    Nonnegative,
    Nonpositive,
    Indefinite,
}

/// A real Fourier multiplier, even in `k`, stored per mode in grid layout.
#[derive(Clone, Debug)]
pub struct OperatorSymbol {
    grid: Arc<Grid>,
    values: Vec<f64>,
    sign: SymbolSign,
}

impl OperatorSymbol {
    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>, sign: SymbolSign) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SavError::InvalidGrid(format!(
                "symbol has {} values for {} modes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SavError::NonFinite("operator symbol"));
        }
        let sym = OperatorSymbol {
            grid: grid.clone(),
            values,
            sign: SymbolSign::Indefinite,
        };
        sym.with_sign(sign)
    }

    /// Evaluates `f` at the physical wavevector of every mode.
    pub fn from_wavevector(
        grid: &Arc<Grid>,
        sign: SymbolSign,
        f: impl Fn([f64; 3]) -> f64,
    ) -> Result<Self> {
        let values = grid.wavevectors().into_iter().map(f).collect();
        Self::from_values(grid, values, sign)
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Result<Self> {
        let sign = if c >= 0.0 {
            SymbolSign::Nonnegative
        } else {
            SymbolSign::Nonpositive
        };
        Self::from_values(grid, vec![c; grid.len()], sign)
    }

    pub fn zero(grid: &Arc<Grid>) -> Self {
        OperatorSymbol {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
            sign: SymbolSign::Nonnegative,
        }
    }

    /// `-Δ`, multiplier `|k|²`.
    pub fn minus_laplacian(grid: &Arc<Grid>) -> Self {
        let values = grid
            .wavevectors()
            .into_iter()
            .map(|k| k.iter().map(|x| x * x).sum())
            .collect();
        OperatorSymbol {
            grid: grid.clone(),
            values,
            sign: SymbolSign::Nonnegative,
        }
    }

    /// `(-Δ)^s` with multiplier `|k|^{2s}`; exactly the identity when `s = 0`.
    pub fn fractional_laplacian(grid: &Arc<Grid>, s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid("s", format!("must lie in [0, 1], got {s}")));
        }
        let lap = Self::minus_laplacian(grid);
        let values = if s == 0.0 {
            vec![1.0; grid.len()]
        } else {
            lap.values.iter().map(|&k2| k2.powf(s)).collect()
        };
        Ok(OperatorSymbol {
            grid: grid.clone(),
            values,
            sign: SymbolSign::Nonnegative,
        })
    }

    /// Eigenvalues of the two-dimensional nonlocal operator for `kernel`.
    pub fn nonlocal(grid: &Arc<Grid>, kernel: &KernelSpec) -> Result<Self> {
        if grid.dim() != 2 {
            return Err(SavError::InvalidGrid(
                "nonlocal symbol requires a 2-D grid".into(),
            ));
        }
        let values = kernel.symbol_values(grid)?;
        Ok(OperatorSymbol {
            grid: grid.clone(),
            values,
            sign: SymbolSign::Indefinite,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sign(&self) -> SymbolSign {
        self.sign
    }

    /// Multiplier at integer frequency `m` (padded with zeros past the grid dimension).
    pub fn value_at(&self, m: &[i64]) -> Option<f64> {
        let mut flat = 0usize;
        for (axis, &n) in self.grid.points().iter().enumerate() {
            let mm = m.get(axis).copied().unwrap_or(0);
            let half = (n / 2) as i64;
            if mm > half || mm <= -half {
                return None;
            }
            let j = if mm >= 0 { mm } else { mm + n as i64 } as usize;
            flat = flat * n + j;
        }
        Some(self.values[flat])
    }

    /// Re-tags the symbol, verifying the new sign constraint.
    pub fn with_sign(mut self, sign: SymbolSign) -> Result<Self> {
        let bad = match sign {
            SymbolSign::Nonnegative => self.values.iter().find(|&&v| v < -SIGN_TOL),
            SymbolSign::Nonpositive => self.values.iter().find(|&&v| v > SIGN_TOL),
            SymbolSign::Indefinite => None,
        };
        if let Some(v) = bad {
            return Err(invalid(
                "symbol",
                format!("value {v:e} violates the {sign:?} tag"),
            ));
        }
        self.sign = sign;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> OperatorSymbol {
        OperatorSymbol {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            sign: SymbolSign::Indefinite,
        }
    }

    pub fn scaled(&self, a: f64) -> OperatorSymbol {
        let sign = match (self.sign, a >= 0.0) {
            (SymbolSign::Indefinite, _) => SymbolSign::Indefinite,
            (s, true) => s,
            (SymbolSign::Nonnegative, false) => SymbolSign::Nonpositive,
            (SymbolSign::Nonpositive, false) => SymbolSign::Nonnegative,
        };
        OperatorSymbol {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| a * v).collect(),
            sign,
        }
    }

    pub fn add(&self, other: &OperatorSymbol) -> Result<OperatorSymbol> {
        if !same_grid(&self.grid, &other.grid) {
            return Err(SavError::GridMismatch("symbol addition"));
        }
        let sign = if self.sign == other.sign {
            self.sign
        } else {
            SymbolSign::Indefinite
        };
        Ok(OperatorSymbol {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            sign,
        })
    }

    pub fn mul(&self, other: &OperatorSymbol) -> Result<OperatorSymbol> {
        if !same_grid(&self.grid, &other.grid) {
            return Err(SavError::GridMismatch("symbol product"));
        }
        Ok(OperatorSymbol {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
            sign: SymbolSign::Indefinite,
        })
    }
}

pub fn symbol_fractional_laplacian(grid: &Arc<Grid>, s: f64) -> Result<OperatorSymbol> {
    OperatorSymbol::fractional_laplacian(grid, s)
}

pub fn symbol_nonlocal(grid: &Arc<Grid>, kernel: &KernelSpec) -> Result<OperatorSymbol> {
    OperatorSymbol::nonlocal(grid, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{apply_symbol, transform_forward, Field};

    #[test]
    fn laplacian_eigenvalue_on_plane_wave() {
        let g = Grid::periodic(&[16, 16]).unwrap();
        let f = Field::from_fn(&g, |x| (2.0 * x[0] + x[1]).cos());
        let lap = OperatorSymbol::minus_laplacian(&g);
        let out = apply_symbol(&lap, &f).unwrap();
        for (a, b) in out.values().iter().zip(f.values()) {
            assert!((a - 5.0 * b).abs() < 1e-12);
        }
        let half = OperatorSymbol::fractional_laplacian(&g, 0.5).unwrap();
        let out = apply_symbol(&half, &f).unwrap();
        for (a, b) in out.values().iter().zip(f.values()) {
            assert!((a - 5f64.sqrt() * b).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_zero_is_identity() {
        let g = Grid::periodic(&[8, 8]).unwrap();
        let f = Field::from_fn(&g, |x| 1.0 + x[0].sin() * (3.0 * x[1]).cos());
        let id = OperatorSymbol::fractional_laplacian(&g, 0.0).unwrap();
        let out = apply_symbol(&id, &f).unwrap();
        for (a, b) in out.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn fractional_values() {
        let g = Grid::periodic(&[16, 16]).unwrap();
        let s1 = OperatorSymbol::fractional_laplacian(&g, 1.0).unwrap();
        assert!((s1.value_at(&[3, 4]).unwrap() - 25.0).abs() < 1e-12);
        let s5 = OperatorSymbol::fractional_laplacian(&g, 0.5).unwrap();
        assert_eq!(s5.value_at(&[0, 0]).unwrap(), 0.0);
        let s01 = OperatorSymbol::fractional_laplacian(&g, 0.1).unwrap();
        assert!((s01.value_at(&[1, 0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(OperatorSymbol::fractional_laplacian(&g, 1.5).is_err());
        assert!(OperatorSymbol::fractional_laplacian(&g, -0.1).is_err());
    }

    #[test]
    fn value_at_handles_negative_and_nyquist() {
        let g = Grid::periodic(&[8]).unwrap();
        let lap = OperatorSymbol::minus_laplacian(&g);
        assert_eq!(lap.value_at(&[-3]), Some(9.0));
        assert_eq!(lap.value_at(&[4]), Some(16.0));
        assert_eq!(lap.value_at(&[-4]), None);
    }

    #[test]
    fn sign_tags_are_enforced() {
        let g = Grid::periodic(&[8]).unwrap();
        let lap = OperatorSymbol::minus_laplacian(&g);
        assert!(lap.clone().with_sign(SymbolSign::Nonpositive).is_err());
        let neg = lap.scaled(-2.0);
        assert_eq!(neg.sign(), SymbolSign::Nonpositive);
        assert!(OperatorSymbol::from_values(&g, vec![f64::NAN; 8], SymbolSign::Indefinite).is_err());
    }

    #[test]
    fn applied_symbol_stays_real() {
        let g = Grid::periodic(&[8, 12]).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] + 2.0 * x[1]).sin() + (4.0 * x[0]).cos());
        let lap = OperatorSymbol::minus_laplacian(&g);
        let mut s = transform_forward(&f);
        for (c, m) in s.coeffs_mut().iter_mut().zip(lap.values()) {
            *c *= m;
        }
        let (_, residue) = s.to_field_with_residue();
        assert!(residue <= 1e-12 * f.l2_norm());
    }
}
