//! Eigenvalues of the radially symmetric nonlocal operator
//! `L_δ u(x) = ∫_{|y|<δ} ρ_δ(|y|) (u(x+y) − u(x)) dy` on periodic 2-D boxes.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::sync::{Arc, Mutex, OnceLock};

use super::Grid;
use crate::error::{invalid, Result, SavError};

const INITIAL_RADIAL: usize = 64;
const INITIAL_ANGULAR: usize = 256;
const MAX_REFINEMENTS: usize = 6;
const TOLERANCE: f64 = 1e-10;

/// Two-term power-law kernel
/// `ρ_δ(r) = c1·2(4−α1)/(π δ^{4−α1} r^{α1}) − c2·2(4−α2)/(π δ^{4−α2} r^{α2})`
/// supported on `r < δ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub c1: f64,
    pub c2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            c1: 20.0,
            c2: 19.0,
            alpha1: 3.0,
            alpha2: 0.0,
            delta: 2.0,
        }
    }
}

type CacheKey = (Vec<usize>, Vec<u64>, [u64; 5]);

fn symbol_cache() -> &'static Mutex<HashMap<CacheKey, Arc<Vec<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<Vec<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(invalid("delta", "horizon must be positive"));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a.is_finite() && a < 4.0) {
                return Err(invalid(name, format!("exponent must be < 4, got {a}")));
            }
        }
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(invalid(name, format!("must be nonnegative, got {c}")));
            }
        }
        Ok(())
    }

    pub fn density(&self, r: f64) -> f64 {
        let term = |c: f64, a: f64| {
            c * 2.0 * (4.0 - a) / (PI * self.delta.powf(4.0 - a) * r.powf(a))
        };
        term(self.c1, self.alpha1) - term(self.c2, self.alpha2)
    }

    /// `∫₀^δ r ρ(r) ∫₀^{2π} (cos(r(k1 cosθ + k2 sinθ)) − 1) dθ dr` at a fixed
    /// quadrature resolution.
    fn quadrature(&self, k: [f64; 2], nodes: &[(f64, f64)], n_theta: usize) -> f64 {
        // cos(x) − 1 is even in x, so θ and θ + π contribute equally
        let half = n_theta / 2;
        let dtheta = TAU / n_theta as f64;
        let dirs: Vec<f64> = (0..half)
            .map(|j| {
                let t = j as f64 * dtheta;
                k[0] * t.cos() + k[1] * t.sin()
            })
            .collect();
        let scale = 0.5 * self.delta;
        let mut total = 0.0;
        for &(x, w) in nodes {
            let r = scale * (x + 1.0);
            let mut inner = 0.0;
            for &d in &dirs {
                let s = (0.5 * r * d).sin();
                inner += s * s;
            }
            inner *= -2.0 * 2.0 * dtheta;
            total += w * scale * r * self.density(r) * inner;
        }
        total
    }

    /// Eigenvalue at physical wavevector `(k1, k2)`, refined by doubling both
    /// quadrature resolutions until successive values agree.
    pub fn eigenvalue(&self, k1: f64, k2: f64) -> Result<f64> {
        self.validate()?;
        if k1 == 0.0 && k2 == 0.0 {
            return Ok(0.0);
        }
        let mut rules = RuleSet::default();
        self.eigenvalue_with(&mut rules, [k1, k2])
    }

    fn eigenvalue_with(&self, rules: &mut RuleSet, k: [f64; 2]) -> Result<f64> {
        let (mut nr, mut nt) = (INITIAL_RADIAL, INITIAL_ANGULAR);
        let mut prev = self.quadrature(k, rules.get(nr), nt);
        let mut change = f64::INFINITY;
        for _ in 0..MAX_REFINEMENTS {
            nr *= 2;
            nt *= 2;
            let next = self.quadrature(k, rules.get(nr), nt);
            change = (next - prev).abs();
            if change <= TOLERANCE * next.abs().max(1.0) {
                return Ok(next);
            }
            prev = next;
        }
        Err(SavError::Quadrature {
            mode: vec![k[0].round() as i64, k[1].round() as i64],
            achieved: change,
        })
    }

    fn cache_key(&self, grid: &Grid) -> CacheKey {
        (
            grid.points().to_vec(),
            grid.lengths().iter().map(|l| l.to_bits()).collect(),
            [
                self.c1.to_bits(),
                self.c2.to_bits(),
                self.alpha1.to_bits(),
                self.alpha2.to_bits(),
                self.delta.to_bits(),
            ],
        )
    }

    pub(crate) fn symbol_values(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.validate()?;
        let key = self.cache_key(grid);
        if let Some(v) = symbol_cache().lock().unwrap().get(&key) {
            return Ok(v.as_ref().clone());
        }
        let mut rules = RuleSet::default();
        let mut by_pair: HashMap<(u64, u64), f64> = HashMap::new();
        let mut values = Vec::with_capacity(grid.len());
        for k in grid.wavevectors() {
            let (a, b) = (k[0].abs(), k[1].abs());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let pair = (lo.to_bits(), hi.to_bits());
            let v = match by_pair.get(&pair) {
                Some(&v) => v,
                None => {
                    let v = if hi == 0.0 {
                        0.0
                    } else {
                        self.eigenvalue_with(&mut rules, [lo, hi])?
                    };
                    by_pair.insert(pair, v);
                    v
                }
            };
            values.push(v);
        }
        symbol_cache()
            .lock()
            .unwrap()
            .insert(key, Arc::new(values.clone()));
        Ok(values)
    }
}

#[derive(Default)]
struct RuleSet {
    rules: HashMap<usize, Vec<(f64, f64)>>,
}

impl RuleSet {
    fn get(&mut self, n: usize) -> &[(f64, f64)] {
        self.rules.entry(n).or_insert_with(|| gauss_legendre(n))
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out[i] = (-x, w);
        out[n - 1 - i] = (x, w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Term-by-term integration of the Bessel series of the angular integral.
    fn series_oracle(kernel: &KernelSpec, k: f64) -> f64 {
        let mut total = 0.0;
        for (c, a, sign) in [
            (kernel.c1, kernel.alpha1, 1.0),
            (kernel.c2, kernel.alpha2, -1.0),
        ] {
            let mut sum = 0.0;
            let mut fact = 1.0;
            for j in 1..80 {
                fact *= j as f64;
                let term = (-1f64).powi(j) * (k / 2.0).powi(2 * j)
                    * kernel.delta.powi(2 * j - 2)
                    / (fact * fact * (2.0 * j as f64 + 2.0 - a));
                sum += term;
            }
            total += sign * c * 4.0 * (4.0 - a) * sum;
        }
        total
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [3, 8, 64] {
            let rule = gauss_legendre(n);
            let w: f64 = rule.iter().map(|p| p.1).sum();
            assert!((w - 2.0).abs() < 1e-13);
            let deg = 2 * n - 2;
            let s: f64 = rule.iter().map(|&(x, w)| w * x.powi(deg as i32)).sum();
            assert!((s - 2.0 / (deg as f64 + 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_mode_vanishes() {
        assert_eq!(KernelSpec::default().eigenvalue(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn matches_series_at_low_modes() {
        let kernel = KernelSpec::default();
        for (m, n) in [(1.0, 0.0), (1.0, 1.0), (2.0, 1.0), (3.0, 0.0)] {
            let q = kernel.eigenvalue(m, n).unwrap();
            let s = series_oracle(&kernel, f64::hypot(m, n));
            assert!((q - s).abs() <= 1e-9 * s.abs(), "({m},{n}): {q} vs {s}");
            assert!(q < 0.0);
        }
    }

    #[test]
    fn rotation_invariant() {
        let kernel = KernelSpec::default();
        let a = kernel.eigenvalue(3.0, 4.0).unwrap();
        let b = kernel.eigenvalue(5.0, 0.0).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn long_wave_limit() {
        let kernel = KernelSpec::default();
        let k = 1e-3;
        let v = kernel.eigenvalue(k, 0.0).unwrap();
        assert!((v + (kernel.c1 - kernel.c2) * k * k).abs() < 1e-5 * k * k, "{v}");
    }

    #[test]
    fn rejects_bad_kernels() {
        let k = KernelSpec { delta: 0.0, ..KernelSpec::default() };
        assert!(k.eigenvalue(1.0, 0.0).is_err());
        let k = KernelSpec { alpha1: 4.0, ..KernelSpec::default() };
        assert!(k.validate().is_err());
    }
}
