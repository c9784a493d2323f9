use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use slsmn::blt::{blt_vec_layout, BltOperator};
use slsmn::StackedSignal;

fn operator(horizon: usize, rows: usize, cols: usize, diag_shift: f64) -> impl Strategy<Value = BltOperator> {
    let count = horizon * (horizon + 1) / 2 * rows * cols;
    proptest::collection::vec(-1.0f64..1.0, count).prop_map(move |vals| {
        let lay = blt_vec_layout(horizon, rows, cols);
        let mut op = lay.unflatten(&vals).unwrap();
        if rows == cols {
            for i in 0..horizon {
                *op.block_mut(i, 0) += DMatrix::identity(rows, cols) * diag_shift;
            }
        }
        op
    })
}

fn pair() -> impl Strategy<Value = (BltOperator, BltOperator)> {
    (1usize..=5, 1usize..=3, 1usize..=3, 1usize..=3)
        .prop_flat_map(|(t, p, q, r)| (operator(t, p, q, 0.0), operator(t, q, r, 0.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_matches_dense((a, b) in pair()) {
        let got = a.mul(&b).unwrap().to_dense();
        let want = a.to_dense() * b.to_dense();
        prop_assert!((got - want).amax() <= 1e-12);
    }

    #[test]
    fn inverse_round_trip(op in (1usize..=5, 1usize..=3).prop_flat_map(|(t, n)| operator(t, n, n, 4.0))) {
        let inv = op.inverse().unwrap();
        let n = op.block_rows() * op.horizon();
        let ident = DMatrix::<f64>::identity(n, n);
        prop_assert!((op.to_dense() * inv.to_dense() - &ident).amax() <= 1e-10);
        prop_assert!((op.mul(&inv).unwrap().to_dense() - ident).amax() <= 1e-10);
    }

    #[test]
    fn flatten_round_trip(op in (1usize..=5, 1usize..=3, 1usize..=3).prop_flat_map(|(t, p, q)| operator(t, p, q, 0.0))) {
        let lay = blt_vec_layout(op.horizon(), op.block_rows(), op.block_cols());
        prop_assert_eq!(lay.len(), op.horizon() * (op.horizon() + 1) / 2 * op.block_rows() * op.block_cols());
        let back = lay.unflatten(lay.flatten(&op).as_slice()).unwrap();
        prop_assert_eq!(back, op);
    }

    /// Changing the input after time `t` never changes the output up to `t`.
    #[test]
    fn outputs_are_causal(
        op in (2usize..=5, 1usize..=3, 1usize..=3).prop_flat_map(|(t, p, q)| operator(t, p, q, 0.0)),
        cut_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let (t, q) = (op.horizon(), op.block_cols());
        let cut = ((cut_frac * t as f64) as usize).min(t - 1);
        let base = DVector::from_fn(t * q, |i, _| ((i as u64).wrapping_mul(seed | 1) % 97) as f64 / 97.0);
        let mut bumped = base.clone();
        for i in (cut + 1) * q..t * q {
            bumped[i] += 1.0;
        }
        let y0 = op.apply(&StackedSignal::new(t, q, base).unwrap()).unwrap();
        let y1 = op.apply(&StackedSignal::new(t, q, bumped).unwrap()).unwrap();
        for s in 0..=cut {
            prop_assert_eq!(y0.block(s), y1.block(s));
        }
    }

    #[test]
    fn apply_matches_dense(
        op in (1usize..=5, 1usize..=3, 1usize..=3).prop_flat_map(|(t, p, q)| operator(t, p, q, 0.0)),
    ) {
        let (t, q) = (op.horizon(), op.block_cols());
        let v = DVector::from_fn(t * q, |i, _| (i as f64 * 0.37).sin());
        let y = op.apply(&StackedSignal::new(t, q, v.clone()).unwrap()).unwrap();
        prop_assert!((y.values() - op.to_dense() * v).amax() <= 1e-12);
    }
}

#[test]
fn random_three_by_three_product_over_five_steps() {
    let lay = blt_vec_layout(5, 3, 3);
    let vals = |k: f64| (0..lay.len()).map(|i| ((i as f64 + k) * 0.731).sin()).collect::<Vec<_>>();
    let a = lay.unflatten(&vals(0.0)).unwrap();
    let b = lay.unflatten(&vals(11.0)).unwrap();
    assert!((a.mul(&b).unwrap().to_dense() - a.to_dense() * b.to_dense()).amax() <= 1e-12);
}

#[test]
fn two_step_scalar_product() {
    let op = |x: f64, y: f64, z: f64| {
        BltOperator::from_blocks(
            2,
            1,
            1,
            [
                ((0, 0), DMatrix::from_element(1, 1, x)),
                ((1, 0), DMatrix::from_element(1, 1, y)),
                ((1, 1), DMatrix::from_element(1, 1, z)),
            ],
        )
        .unwrap()
    };
    let a = op(2.0, 3.0, 5.0);
    let b = op(7.0, 11.0, 13.0);
    // dense a = [[2,0],[5,3]], b = [[7,0],[13,11]]
    let want = DMatrix::from_row_slice(2, 2, &[14.0, 0.0, 35.0 + 39.0, 33.0]);
    assert_eq!(a.mul(&b).unwrap().to_dense(), want);
}
