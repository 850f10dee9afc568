mod common;

use cavit::gradcheck::{check_op, FD_STEP};
use cavit::{Tape, Tensor, Var};
use common::randn;
use proptest::prelude::*;

fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> cavit::Result<Var> {
    let w = t.constant(randn(t.dims(x), 1.0, seed));
    let p = t.mul(x, w)?;
    Ok(t.sum_all(p))
}

#[test]
fn matmul_gradient_4x5_by_5x3() {
    let a = randn(&[4, 5], 1.0, 1);
    let b = randn(&[5, 3], 1.0, 2);
    let r = check_op(&[a, b], FD_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    })
    .unwrap();
    assert!(r.max() < 1e-7, "{:?}", r.per_input);
}

#[test]
fn transpose_sum_gradient_is_ones() {
    let x = randn::<f64>(&[2, 3, 4], 1.0, 4);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.transpose_last2(v).unwrap();
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(v).unwrap().bit_eq(&Tensor::ones([2, 3, 4]).unwrap()));
    let r = check_op(&[x], FD_STEP, |t, v| {
        let y = t.transpose_last2(v[0])?;
        weighted_sum(t, y, 5)
    })
    .unwrap();
    assert!(r.max() < 1e-6);
}

#[test]
fn softmax_jacobian_random_5_vector() {
    let x = randn(&[5], 1.0, 6);
    let r = check_op(&[x], FD_STEP, |t, v| {
        let y = t.softmax_lastdim(v[0]);
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert!(r.max() < 1e-6);
}

#[test]
fn softmax_large_logits_do_not_overflow() {
    let y = Tensor::<f64>::from_f64([2], &[1000.0, 0.0]).unwrap().softmax_lastdim();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
}

#[test]
fn layernorm_gradient_random_2x4() {
    let x = randn(&[2, 4], 1.0, 8);
    let g = randn(&[4], 1.0, 9);
    let b = randn(&[4], 1.0, 10);
    let r = check_op(&[x, g, b], FD_STEP, |t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(t, y, 11)
    })
    .unwrap();
    assert!(r.max() < 1e-6, "{:?}", r.per_input);
}

#[test]
fn gelu_gradient_on_fixed_points() {
    let x = Tensor::from_f64([5], &[-3.0, -1.0, 0.0, 1.0, 3.0]).unwrap();
    let r = check_op(&[x], FD_STEP, |t, v| {
        let y = t.gelu(v[0]);
        Ok(t.sum_all(y))
    })
    .unwrap();
    assert!(r.max() < 1e-6);
    assert_eq!(Tensor::<f64>::zeros([1]).unwrap().gelu().data()[0], 0.0);
}

#[test]
fn concat_sum_gradient_is_ones_on_both_parts() {
    let a = randn::<f64>(&[1, 1, 4], 1.0, 12);
    let b = randn::<f64>(&[1, 3, 4], 1.0, 13);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.concat_axis1(va, vb).unwrap();
    assert_eq!(tape.dims(c), &[1, 4, 4]);
    let s = tape.sum_all(c);
    tape.backward(s).unwrap();
    assert!(tape.grad(va).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(tape.grad(vb).unwrap().data().iter().all(|&g| g == 1.0));
    let r = check_op(&[a, b], FD_STEP, |t, v| {
        let c = t.concat_axis1(v[0], v[1])?;
        weighted_sum(t, c, 14)
    })
    .unwrap();
    assert!(r.max() < 1e-6);
}

#[test]
fn add_zeros_is_bit_exact_identity() {
    let x = randn::<f32>(&[3, 4], 1.0, 15);
    assert!(x.add(&Tensor::zeros([3, 4]).unwrap()).unwrap().bit_eq(&x));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn(&[3], 1.0, 16));
    assert!(tape.backward(x).is_err());
}

fn dims(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 2..=max_rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_is_an_involution(d in dims(4), seed in any::<u64>()) {
        let x = randn::<f32>(&d, 1.0, seed);
        let back = x.transpose_last2().unwrap().transpose_last2().unwrap();
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn softmax_rows_sum_to_one(d in dims(4), scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = randn::<f64>(&d, scale, seed).softmax_lastdim();
        let k = *d.last().unwrap();
        for row in x.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layernorm_rows_are_standardized(rows in 1usize..6, d in 2usize..9, seed in any::<u64>()) {
        let x = randn::<f64>(&[rows, d], 3.0, seed);
        let y = x.layernorm(&Tensor::ones([d]).unwrap(), &Tensor::zeros([d]).unwrap(), 1e-12).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_undoes_concat(b in 1usize..3, ta in 1usize..4, tb in 1usize..4, d in 1usize..5, seed in any::<u64>()) {
        let a = randn::<f32>(&[b, ta, d], 1.0, seed);
        let c = randn::<f32>(&[b, tb, d], 1.0, seed.wrapping_add(1));
        let (a2, c2) = a.concat_axis1(&c).unwrap().split_axis1(ta).unwrap();
        prop_assert!(a2.bit_eq(&a) && c2.bit_eq(&c));
    }

    #[test]
    fn matmul_matches_naive_loops(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = randn::<f64>(&[m, k], 1.0, seed);
        let b = randn::<f64>(&[k, n], 1.0, seed.wrapping_add(1));
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }
}
