mod common;

use common::{contract, fd_gradient, numerical_rank, rel_error};
use metalora::adapter::{backward_with, check_ranks, forward_with, init_factors, merge, AdaptedLayer, AdapterFactors, InitMode};
use metalora::numerics::{gaussian, Matrix, Rng};
use metalora::Error;
use proptest::prelude::*;

fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (2usize..=16, 2usize..=16).prop_flat_map(|(d1, d2)| {
        (1..=d1.min(d2)).prop_flat_map(move |r1| (Just(d1), Just(d2), Just(r1), 1..=r1, any::<u64>()))
    })
}

fn random_layer(d1: usize, d2: usize, r1: usize, r2: usize, rng: &mut Rng) -> (Matrix, AdapterFactors) {
    let w0 = gaussian(rng, d2, d1, 0.3);
    let f = AdapterFactors::new(gaussian(rng, r1, d1, 0.4), gaussian(rng, r2, r1, 0.5), gaussian(rng, d2, r2, 0.7))
        .unwrap();
    (w0, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn input_and_base_gradients_match_finite_differences((d1, d2, r1, r2, seed) in shapes()) {
        let mut rng = Rng::new(seed);
        let (w0, f) = random_layer(d1, d2, r1, r2, &mut rng);
        let x = gaussian(&mut rng, d1, 2, 1.0);
        let g = gaussian(&mut rng, d2, 2, 1.0);
        let (_, cache) = forward_with(&w0, Some(f.as_refs()), 0.8, &x).unwrap();
        let grads = backward_with(&w0, Some(f.as_refs()), 0.8, &cache, &g).unwrap();
        let fx = fd_gradient(&x, 1e-5, |xx| contract(&g, &forward_with(&w0, Some(f.as_refs()), 0.8, xx).unwrap().0));
        let fw = fd_gradient(&w0, 1e-5, |ww| contract(&g, &forward_with(ww, Some(f.as_refs()), 0.8, &x).unwrap().0));
        prop_assert!(rel_error(&grads.input, &fx) <= 1e-4);
        prop_assert!(rel_error(&grads.w0, &fw) <= 1e-4);
    }

    #[test]
    fn merged_rank_never_exceeds_r2((d1, d2, r1, r2, seed) in shapes()) {
        let mut rng = Rng::new(seed);
        let (_, f) = random_layer(d1, d2, r1, r2, &mut rng);
        let m = merge(&f);
        prop_assert_eq!(m.down.shape(), (r2, d1));
        prop_assert_eq!(m.up.shape(), (d2, r2));
        prop_assert!(numerical_rank(&m.delta_w()) <= r2);
        prop_assert!(numerical_rank(&f.delta_w()) <= r2);
    }

    #[test]
    fn fresh_adapter_is_a_no_op((d1, d2, r1, r2, seed) in shapes()) {
        let mut rng = Rng::new(seed);
        let w0 = gaussian(&mut rng, d2, d1, 1.0);
        let f = init_factors(&mut rng, d1, d2, r1, r2, InitMode::Fresh).unwrap();
        let x = gaussian(&mut rng, d1, 3, 1.0);
        let mut layer = AdaptedLayer::new(w0.clone(), f).unwrap();
        prop_assert_eq!(layer.forward(&x).unwrap(), w0.matmul(&x).unwrap());
    }
}

#[test]
fn rank_constraints_are_typed_errors() {
    assert!(matches!(check_ranks(8, 4, 5, 1), Err(Error::Rank(_))));
    assert!(matches!(check_ranks(8, 8, 2, 3), Err(Error::Rank(_))));
    assert!(matches!(check_ranks(8, 8, 2, 0), Err(Error::Rank(_))));
    assert!(check_ranks(8, 8, 8, 8).is_ok());
    let r = AdapterFactors::new(Matrix::zeros(2, 4), Matrix::zeros(3, 2), Matrix::zeros(4, 3));
    assert!(r.is_err());
}

#[test]
fn backward_before_forward_is_refused() {
    let mut rng = Rng::new(1);
    let (w0, f) = random_layer(4, 4, 2, 1, &mut rng);
    let layer = AdaptedLayer::new(w0, f).unwrap();
    assert!(matches!(layer.backward(&Matrix::zeros(4, 1)), Err(Error::MissingCache)));
}

#[test]
fn mismatched_input_is_a_dimension_error() {
    let mut rng = Rng::new(2);
    let (w0, f) = random_layer(5, 3, 2, 1, &mut rng);
    let mut layer = AdaptedLayer::new(w0, f).unwrap();
    assert!(layer.forward(&Matrix::zeros(4, 1)).is_err());
}
