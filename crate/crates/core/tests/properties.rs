use proptest::prelude::*;

use accordion_core::compressor::{self, conservation_error, decompress, float_count, topk_count, LayerState};
use accordion_core::linalg::{dot, norm2, orthonormalize};
use accordion_core::{CompressedMessage, Level, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

fn shaped_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| (tensor(r, c), tensor(r, c)))
}

fn level_for(shape: (usize, usize)) -> impl Strategy<Value = Level> {
    let max_rank = shape.0.min(shape.1).max(1);
    prop_oneof![
        Just(Level::Dense),
        (1..=max_rank).prop_map(|rank| Level::PowerSgd { rank }),
        (0.01f64..=1.0).prop_map(|fraction| Level::TopK { fraction }),
    ]
}

proptest! {
    #[test]
    fn compression_conserves_gradient_plus_residual(
        ((g, e), level) in shaped_pair().prop_flat_map(|(g, e)| {
            let shape = g.shape();
            (Just((g, e)), level_for(shape))
        }),
        seed in any::<u64>(),
    ) {
        let mut state = LayerState::new(g.shape(), seed);
        state.residual = e.clone();
        let msg = compressor::compress(&g, &level, &mut state, 0).unwrap();
        prop_assert!(conservation_error(&e, &g, &msg, &state.residual).unwrap() <= 1e-12);
        prop_assert_eq!(msg.float_count, float_count(&level, g.shape()));
    }

    #[test]
    fn message_bytes_round_trip(
        ((g, _), level) in shaped_pair().prop_flat_map(|(g, e)| {
            let shape = g.shape();
            (Just((g, e)), level_for(shape))
        }),
        layer in 0usize..100,
    ) {
        let mut state = LayerState::new(g.shape(), 7);
        let msg = compressor::compress(&g, &level, &mut state, layer).unwrap();
        let back = CompressedMessage::from_bytes(&msg.to_bytes()).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(decompress(&back, g.shape()).unwrap(), decompress(&msg, g.shape()).unwrap());
    }

    #[test]
    fn cauchy_schwarz(u in prop::collection::vec(-1e3f64..1e3, 1..50), seed in any::<u64>()) {
        let v = Tensor::random_normal(1, u.len(), seed).into_data();
        prop_assert!(dot(&u, &v).abs() <= norm2(&u) * norm2(&v) * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn transpose_is_an_involution_and_reverses_products(a in tensor(5, 3), b in tensor(3, 4)) {
        prop_assert_eq!(a.transpose().transpose(), a.clone());
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().norm2() <= 1e-12 * lhs.norm2().max(1.0));
    }

    #[test]
    fn orthonormalize_is_orthonormal_and_idempotent(rows in 1usize..20, cols in 1usize..5, seed in any::<u64>(), dup in any::<bool>()) {
        let cols = cols.min(rows);
        let mut m = Tensor::random_normal(rows, cols, seed);
        if dup && cols > 1 {
            // force a dependent column
            let first = m.column(0);
            m.set_column(cols - 1, &first);
        }
        let q = orthonormalize(&m, seed).unwrap().q;
        let gram = q.transpose().matmul(&q).unwrap();
        prop_assert!(gram.sub(&Tensor::identity(cols)).unwrap().norm2() <= 1e-10);
        let again = orthonormalize(&q, seed).unwrap();
        prop_assert!(again.replaced.is_empty());
        prop_assert!(again.q.sub(&q).unwrap().norm2() <= 1e-10);
    }

    #[test]
    fn topk_count_is_the_ceiling(k in 1usize..500, extra in 0usize..500) {
        let d = k + extra;
        prop_assert_eq!(topk_count(k as f64 / d as f64, d), k);
        let fraction = (k as f64 - 0.5) / d as f64;
        prop_assert_eq!(topk_count(fraction, d), k);
    }
}

#[test]
fn warm_start_error_never_increases_on_a_fixed_matrix() {
    for seed in 0..20 {
        let g = Tensor::random_normal(30, 20, seed);
        let mut state = LayerState::new(g.shape(), seed);
        let mut last = f64::INFINITY;
        for step in 0..15 {
            state.residual = Tensor::zeros(30, 20);
            let msg = compressor::compress(&g, &Level::PowerSgd { rank: 3 }, &mut state, 0).unwrap();
            let err = decompress(&msg, g.shape()).unwrap().sub(&g).unwrap().norm2();
            assert!(err <= last * (1.0 + 1e-9), "seed {seed} step {step}: {err} > {last}");
            last = err;
        }
    }
}
