//! Initial data generators.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use savflow_core::multicomponent::QTensorField;
use savflow_core::spectral::{transform_backward, transform_forward, Field, Grid};

use crate::config::InitialBlock;

/// Uniform noise in `[−amplitude, amplitude]` around `mean`, low-pass
/// filtered to `|m_i| ≤ N_i/6` on every axis, with the sample mean reset to
/// `mean` exactly. Amplitude 0 gives the constant field.
pub fn random_initial(grid: &Arc<Grid>, amplitude: f64, seed: u64, mean: f64) -> Field {
    if amplitude == 0.0 {
        return Field::constant(grid, mean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (0..grid.len())
        .map(|_| rng.gen_range(-amplitude..=amplitude))
        .collect();
    let f = Field::new(grid.clone(), noise).expect("noise matches the grid");
    let mut hat = transform_forward(&f);
    let freqs = grid.frequencies();
    let points = grid.points().to_vec();
    for (c, m) in hat.coeffs_mut().iter_mut().zip(&freqs) {
        let keep = points
            .iter()
            .enumerate()
            .all(|(axis, &n)| 6 * m[axis].unsigned_abs() as usize <= n);
        if !keep {
            *c = 0.0.into();
        }
    }
    let mut out = transform_backward(&hat);
    let shift = mean - out.mean();
    for v in out.values_mut() {
        *v += shift;
    }
    out
}

/// `amplitude · Π sin(2π x_i / L_i)`.
pub fn sine_product(grid: &Arc<Grid>, amplitude: f64) -> Field {
    let lengths = grid.lengths().to_vec();
    Field::from_fn(grid, |x| {
        amplitude
            * lengths
                .iter()
                .enumerate()
                .map(|(i, l)| (2.0 * PI * x[i] / l).sin())
                .product::<f64>()
    })
}

/// `inside` where the distance to the box centre is below `radius`. With a
/// `width` the values blend as `tanh((radius − d)/width)`.
pub fn disc(grid: &Arc<Grid>, radius: f64, inside: f64, outside: f64, width: Option<f64>) -> Field {
    let centre: Vec<f64> = grid.lengths().iter().map(|l| 0.5 * l).collect();
    let (mid, half) = (0.5 * (inside + outside), 0.5 * (inside - outside));
    Field::from_fn(grid, |x| {
        let d2: f64 = centre.iter().enumerate().map(|(i, c)| (x[i] - c).powi(2)).sum();
        match width {
            Some(w) => mid + half * ((radius - d2.sqrt()) / w).tanh(),
            None if d2 < radius * radius => inside,
            None => outside,
        }
    })
}

/// Gaussian bumps of standard deviation `width` on a `cells × cells` square
/// lattice, shifted to sample mean `mean`, plus low-pass noise of size `noise`.
pub fn square_lattice(
    grid: &Arc<Grid>,
    mean: f64,
    amplitude: f64,
    cells: usize,
    width: f64,
    noise: f64,
    seed: u64,
) -> Field {
    let lengths = grid.lengths().to_vec();
    let period: Vec<f64> = lengths.iter().map(|l| l / cells as f64).collect();
    let mut f = Field::from_fn(grid, |x| {
        let mut d2 = 0.0;
        for axis in 0..2 {
            let p = period[axis];
            let mut d = (x[axis] / p).rem_euclid(1.0) - 0.5;
            d *= p;
            d2 += d * d;
        }
        amplitude * (-d2 / (2.0 * width * width)).exp()
    });
    if noise > 0.0 {
        f.axpy(1.0, &random_initial(grid, noise, seed, 0.0));
    }
    let shift = mean - f.mean();
    for v in f.values_mut() {
        *v += shift;
    }
    f
}

/// Builds the scalar initial field of a config block.
pub fn scalar_initial(grid: &Arc<Grid>, block: &InitialBlock, seed: Option<u64>) -> Field {
    let seed = seed.unwrap_or(0);
    match *block {
        InitialBlock::SineProduct { amplitude } => sine_product(grid, amplitude),
        InitialBlock::Random { amplitude, mean } => random_initial(grid, amplitude, seed, mean),
        InitialBlock::Disc { radius, inside, outside, width } => disc(grid, radius, inside, outside, width),
        InitialBlock::SquareLattice { mean, amplitude, cells, width, noise } => {
            square_lattice(grid, mean, amplitude, cells, width, noise, seed)
        }
    }
}

/// Q-tensor initial data: every chart component is built from the block with
/// its own derived seed.
pub fn qtensor_initial(grid: &Arc<Grid>, block: &InitialBlock, seed: Option<u64>) -> QTensorField {
    let base = seed.unwrap_or(0);
    let comps: [Field; 5] = std::array::from_fn(|i| {
        let s = base.wrapping_mul(5).wrapping_add(i as u64);
        scalar_initial(grid, block, Some(s))
    });
    QTensorField::new(comps).expect("components share the grid")
}
