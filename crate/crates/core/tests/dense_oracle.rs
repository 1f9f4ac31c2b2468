//! Reduced (Sherman–Morrison) updates against dense assembly of the full
//! linear systems, for scalar, coupled and tensor states.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use savflow_core::flow::{GradientFlow, Vector};
use savflow_core::models::{gl_model, mbe_model, npfc_model};
use savflow_core::multicomponent::{
    CouplingMatrix, CoupledModel, MultiField, QTensorField, QTensorModel, QTensorParams,
};
use savflow_core::oracles::{dense_sav_step, dense_solve_oracle};
use savflow_core::sav::{advance, sav_weight, Scheme};
use savflow_core::spectral::{Field, Grid, KernelSpec};

const LABELS: [&str; 8] = ["be", "cn", "cn-half", "bdf2", "bdf3a", "bdf3b", "bdf4a", "bdf4b"];

fn noise(grid: &Arc<Grid>, rng: &mut ChaCha8Rng, amp: f64) -> Field {
    let v = (0..grid.len()).map(|_| rng.gen_range(-amp..amp)).collect();
    Field::new(grid.clone(), v).unwrap()
}

fn check<F: GradientFlow>(flow: &F, make: impl Fn(&mut ChaCha8Rng) -> F::State, dt: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in LABELS {
        let scheme = Scheme::from_label(label).unwrap();
        let phis: Vec<F::State> = (0..4).map(|_| make(&mut rng)).collect();
        let rs: Vec<f64> = phis.iter().map(|p| flow.sav_variable(p).unwrap()).collect();
        let (a, ra) = advance(flow, scheme, &phis, &rs, dt).unwrap();
        let (b, rb) = dense_sav_step(flow, scheme, &phis, &rs, dt).unwrap();
        let mut d = a.clone();
        d.axpy(-1.0, &b);
        let rel = d.max_abs() / a.max_abs();
        assert!(rel <= 1e-10, "{label}: relative difference {rel:e}");
        assert!((ra - rb).abs() <= 1e-10 * ra.abs(), "{label}: r {ra} vs {rb}");
    }
}

#[test]
fn scalar_models_match_dense_assembly() {
    let g = Grid::periodic(&[8, 8]).unwrap();
    let ac = gl_model(&g, 0.3, 1.0, 0.0, 1.0).unwrap();
    let ch = gl_model(&g, 0.3, 1.0, 1.0, 1.0).unwrap();
    let frac = gl_model(&g, 0.3, 1.0, 0.5, 1.0).unwrap();
    let mbe = mbe_model(&g, 0.1, 0.05, 1.0, 1.0).unwrap();
    let gp = Grid::new(&[8, 8], &[50.0, 50.0]).unwrap();
    let pfc = npfc_model(&gp, 0.025, &KernelSpec::default()).unwrap();
    for (i, dt) in [1e-3, 0.1, 1.0].into_iter().enumerate() {
        let s = i as u64;
        check(&ac, |r| noise(&g, r, 0.8), dt, s);
        check(&ch, |r| noise(&g, r, 0.8), dt, 10 + s);
        check(&frac, |r| noise(&g, r, 0.8), dt, 20 + s);
        check(&mbe, |r| noise(&g, r, 0.05), dt, 30 + s);
        check(&pfc, |r| noise(&gp, r, 0.8), dt, 40 + s);
    }
}

#[test]
fn coupled_systems_match_dense_assembly() {
    let g = Grid::periodic(&[8, 8]).unwrap();
    for (k, entries) in [(2, vec![1.0, 0.3, 0.3, 0.5]), (3, vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7])] {
        let d = CouplingMatrix::new(k, entries).unwrap();
        let model = CoupledModel::ginzburg_landau(&g, d, 0.3, 0.5, 1.0, 1.0, 2.0).unwrap();
        let make = |r: &mut ChaCha8Rng| MultiField::new((0..k).map(|_| noise(&g, r, 0.8)).collect()).unwrap();
        check(&model, make, 0.05, k as u64);
        // eigen-rotated constant-coefficient solve against the dense operator
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rhs = make(&mut rng);
        let a = model.solve_shifted(0.2, &rhs);
        let b = dense_solve_oracle(&model, 0.2, None, &rhs).unwrap();
        let mut diff = a.clone();
        diff.axpy(-1.0, &b);
        assert!(diff.max_abs() <= 1e-10 * a.max_abs());
    }
}

#[test]
fn qtensor_matches_dense_assembly() {
    let g = Grid::periodic(&[4, 4, 4]).unwrap();
    let model = QTensorModel::new(&g, QTensorParams::default()).unwrap();
    let make = |r: &mut ChaCha8Rng| QTensorField::new(std::array::from_fn(|_| noise(&g, r, 0.3))).unwrap();
    check(&model, make, 0.05, 7);
}

#[test]
fn rank_one_solve_matches_dense_assembly() {
    let g = Grid::periodic(&[8, 8]).unwrap();
    let model = gl_model(&g, 0.3, 1.0, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phibar = noise(&g, &mut rng, 0.8);
    let b = sav_weight(&model, &phibar).unwrap();
    let rhs = noise(&g, &mut rng, 1.0);
    let x = dense_solve_oracle(&model, 0.1, Some((0.05, &b)), &rhs).unwrap();
    // residual of the assembled equation evaluated with the spectral operators
    let mut res = x.clone();
    res.axpy(-0.1, &model.apply_g(&model.apply_l(&x)));
    res.axpy(-0.05 * model.inner(&b, &x), &model.apply_g(&b));
    res.axpy(-1.0, &rhs);
    assert!(res.max_abs() <= 1e-10 * rhs.max_abs());
}
