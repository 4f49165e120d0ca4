mod common;

use common::{random_head, tape_head, HeadFlags};
use knnformer::numerics::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.is_infinite() && y.is_infinite() && x.signum() == y.signum() {
                0.0
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn check(seed: u64, n: usize, d: usize, w: usize, fl: HeadFlags) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = if fl.masked { 0.5 } else { 1.0 };
    let mut h = random_head(&mut rng, n, d, w, 6, density);
    if !fl.masked {
        h.allowed = vec![true; n * n];
    }
    let mut tape = Tape::new();
    let v = tape_head(&mut tape, &h, fl);
    let e_ref = h.scores(fl.hop, fl.sigma, fl.p2c_key_row);
    let a_ref = h.weights(&e_ref);
    let z_ref = h.output(&a_ref, fl.hop, fl.sigma);
    (
        max_abs_diff(tape.value(v.scores).data(), &e_ref),
        max_abs_diff(tape.value(v.output).data(), &z_ref),
    )
}

#[test]
fn scores_and_outputs_match_reference_on_fifty_instances() {
    for seed in 0..50u64 {
        let fl = HeadFlags {
            hop: seed % 2 == 0,
            sigma: seed % 3 != 0,
            p2c_key_row: seed % 5 == 0,
            masked: seed % 4 < 2,
        };
        let (de, dz) = check(seed, 3 + (seed as usize % 6), 2 + (seed as usize % 4), 2 + (seed as usize % 2), fl);
        assert!(de < 1e-9 && dz < 1e-9, "seed {seed}: {de} {dz}");
    }
}

#[test]
fn plain_head_is_scaled_dot_product() {
    let fl = HeadFlags {
        hop: false,
        sigma: false,
        p2c_key_row: false,
        masked: false,
    };
    let (de, dz) = check(7, 4, 3, 2, fl);
    assert!(de < 1e-12 && dz < 1e-12);
}

#[test]
fn masked_weights_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = random_head(&mut rng, 7, 3, 2, 6, 0.4);
    let mut tape = Tape::new();
    let fl = HeadFlags {
        hop: true,
        sigma: true,
        p2c_key_row: false,
        masked: true,
    };
    let v = tape_head(&mut tape, &h, fl);
    let a = tape.value(v.weights).data();
    for (idx, ok) in h.allowed.iter().enumerate() {
        if !ok {
            assert_eq!(a[idx], 0.0);
            assert_eq!(tape.value(v.scores).data()[idx], f64::NEG_INFINITY);
        }
    }
}

proptest! {
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000, n in 1usize..9, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_head(&mut rng, n, d, 2, 6, 0.5);
        let mut tape = Tape::new();
        let fl = HeadFlags { hop: true, sigma: true, p2c_key_row: false, masked: true };
        let v = tape_head(&mut tape, &h, fl);
        let a = tape.value(v.weights);
        for i in 0..n {
            let s: f64 = a.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(a.row(i).iter().all(|x| *x >= 0.0));
        }
    }
}
