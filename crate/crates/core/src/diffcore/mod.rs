//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! The engine is define-by-run: a [`Tape`] records primitive operations as
//! they execute and [`Tape::backward`] replays them in reverse. Gradients are
//! returned per leaf and can be added into parameter tensors; nothing is
//! cleared automatically, so callers zero gradients before each update.

mod gemm;
mod tape;
mod tensor;

pub use tape::{logsumexp_row, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Runs the backward sweep of `tape` from `loss`.
pub fn backward(loss: Var, tape: &Tape<'_>) -> Result<Gradients> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::testutil::{central_diff, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap().with_grad()
    }

    #[test]
    fn fresh_tape_is_empty() {
        assert_eq!(Tape::new().len(), 0);
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&eye), tape.leaf(&m));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let r = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        let (a, b) = (tape.leaf(&r), tape.leaf(&col));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        match tape.matmul(va, vb) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trans in [false, true] {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = if trans {
                rand_tensor(&mut rng, &[2, 4])
            } else {
                rand_tensor(&mut rng, &[4, 2])
            };
            let w = rand_tensor(&mut rng, &[3, 2]);
            // loss = Σ w ⊙ (a·b) so every output entry gets a distinct upstream gradient
            let f = |a: &Tensor, b: &Tensor| -> f64 {
                let mut t = Tape::new();
                let (va, vb, vw) = (t.leaf(a), t.leaf(b), t.constant_ref(&w));
                let c = if trans { t.matmul_nt(va, vb) } else { t.matmul(va, vb) }.unwrap();
                let p = t.mul(c, vw).unwrap();
                let s = t.sum(p).unwrap();
                t.scalar(s).unwrap()
            };
            let mut t = Tape::new();
            let (va, vb, vw) = (t.leaf(&a), t.leaf(&b), t.constant_ref(&w));
            let c = if trans { t.matmul_nt(va, vb) } else { t.matmul(va, vb) }.unwrap();
            let p = t.mul(c, vw).unwrap();
            let s = t.sum(p).unwrap();
            let g = t.backward(s).unwrap();
            let ga_num = central_diff(&a, 1e-6, |x| f(x, &b));
            let gb_num = central_diff(&b, 1e-6, |x| f(&a, x));
            assert!(rel_err(g.wrt(va).unwrap(), &ga_num) < 1e-5);
            assert!(rel_err(g.wrt(vb).unwrap(), &gb_num) < 1e-5);
        }
    }

    #[test]
    fn elementwise_values() {
        let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.unary(Unary::LEAKY_RELU, v).unwrap();
        assert_eq!(t.value(y), &[-0.2, 0.0, 2.0]);

        let z = Tensor::scalar(0.0);
        let v = t.leaf(&z);
        let y = t.unary(Unary::Softplus, v).unwrap();
        assert!((t.value(y)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_derivative_at_zero_is_one() {
        let x = Tensor::new([1], vec![0.0]).unwrap().with_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.unary(Unary::LEAKY_RELU, v).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(v).unwrap(), &[1.0]);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let x = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        assert!(matches!(t.unary(Unary::Log, v), Err(Error::Domain { .. })));
    }

    #[test]
    fn every_unary_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kinds = [
            Unary::LEAKY_RELU,
            Unary::Softplus,
            Unary::Sigmoid,
            Unary::Tanh,
            Unary::Exp,
            Unary::Log,
            Unary::Negate,
            Unary::Square,
        ];
        for kind in kinds {
            let mut x = rand_tensor(&mut rng, &[7]);
            if kind == Unary::Log {
                x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
            }
            if let Unary::LeakyRelu(_) = kind {
                // keep away from the kink where finite differences straddle it
                x.data_mut().iter_mut().for_each(|v| {
                    if v.abs() < 1e-3 {
                        *v = 0.5
                    }
                });
            }
            let f = |x: &Tensor| {
                let mut t = Tape::new();
                let v = t.leaf(x);
                let y = t.unary(kind, v).unwrap();
                let s = t.sum(y).unwrap();
                t.scalar(s).unwrap()
            };
            let mut t = Tape::new();
            let v = t.leaf(&x);
            let y = t.unary(kind, v).unwrap();
            let s = t.sum(y).unwrap();
            let g = t.backward(s).unwrap();
            let num = central_diff(&x, 1e-6, f);
            let tol = if kind == Unary::Sigmoid { 1e-6 } else { 1e-5 };
            assert!(rel_err(g.wrt(v).unwrap(), &num) < tol, "{kind:?}");
        }
    }

    #[test]
    fn logsumexp_values_and_stability() {
        let mut t = Tape::new();
        let a = t.constant([1, 2], vec![0.0, 0.0]).unwrap();
        let l = t.logsumexp(a).unwrap();
        assert!((t.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let a = t.constant([1, 2], vec![1000.0, 1000.0]).unwrap();
        let l = t.logsumexp(a).unwrap();
        assert!((t.value(l)[0] - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

        let a = t.constant([2, 0], vec![]).unwrap();
        assert!(matches!(t.logsumexp(a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn logsumexp_matches_naive_sum_at_moderate_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[5, 10]);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let l = t.logsumexp(v).unwrap();
        for i in 0..5 {
            let naive: f64 = x.row(i).iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((t.value(l)[i] - naive).abs() < 1e-12);
        }
        // backward yields softmax weights
        let s = t.sum(l).unwrap();
        let g = t.backward(s).unwrap();
        let gv = g.wrt(v).unwrap();
        for i in 0..5 {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..10 {
                assert!((gv[i * 10 + j] - x.row(i)[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_and_square() {
        let x = Tensor::new([2, 3], vec![1.0; 6]).unwrap().with_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let s = t.sum(v).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(v).unwrap(), &[1.0; 6]);

        let x = Tensor::new([1], vec![3.0]).unwrap().with_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(v).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::zeros([2]).with_grad();
        let mut t = Tape::new();
        let v = t.leaf(&x);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut x = Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad();
        for _ in 0..2 {
            let g = {
                let mut t = Tape::new();
                let v = t.leaf(&x);
                let s = t.sum(v).unwrap();
                let g = t.backward(s).unwrap();
                g.wrt(v).unwrap().to_vec()
            };
            x.accumulate_grad(&g).unwrap();
        }
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), &[0.0, 0.0]);
    }

    fn three_layer_mlp(
        t: &mut Tape<'_>,
        x: Var,
        layers: &[(Var, Var)],
    ) -> Var {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let z = t.matmul_nt(h, w).unwrap();
            h = t.add_row(z, b).unwrap();
            if i + 1 < layers.len() {
                h = t.unary(Unary::Tanh, h).unwrap();
            }
        }
        let s = t.sum(h).unwrap();
        s
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = [3usize, 6, 5, 1];
        let x = rand_tensor(&mut rng, &[4, 3]);
        let mut params: Vec<Tensor> = Vec::new();
        for w in dims.windows(2) {
            params.push(rand_tensor(&mut rng, &[w[1], w[0]]));
            params.push(rand_tensor(&mut rng, &[w[1]]));
        }
        let eval = |ps: &[Tensor]| {
            let mut t = Tape::new();
            let vx = t.constant_ref(&x);
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p)).collect();
            let layers: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
            let s = three_layer_mlp(&mut t, vx, &layers);
            t.scalar(s).unwrap()
        };
        let mut t = Tape::new();
        let vx = t.constant_ref(&x);
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p)).collect();
        let layers: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        let s = three_layer_mlp(&mut t, vx, &layers);
        let g = t.backward(s).unwrap();
        for (pi, v) in vars.iter().enumerate() {
            let num = central_diff(&params[pi], 1e-6, |p| {
                let mut ps = params.clone();
                ps[pi] = p.clone();
                eval(&ps)
            });
            assert!(rel_err(g.wrt(*v).unwrap(), &num) < 1e-4, "param {pi}");
        }
    }

    #[test]
    fn batch_norm_and_row_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, &[6, 3]);
        let w = rand_tensor(&mut rng, &[6, 3]);
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(x);
            let (bn, _, _) = t.batch_norm(v, 1e-5).unwrap();
            let vw = t.constant_ref(&w);
            let p = t.mul(bn, vw).unwrap();
            let nr = t.row_norm(v).unwrap();
            let a = t.sum(p).unwrap();
            let b = t.sum(nr).unwrap();
            let s = t.add(a, b).unwrap();
            t.scalar(s).unwrap()
        };
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let (bn, _, _) = t.batch_norm(v, 1e-5).unwrap();
        let vw = t.constant_ref(&w);
        let p = t.mul(bn, vw).unwrap();
        let nr = t.row_norm(v).unwrap();
        let a = t.sum(p).unwrap();
        let b = t.sum(nr).unwrap();
        let s = t.add(a, b).unwrap();
        let g = t.backward(s).unwrap();
        let num = central_diff(&x, 1e-6, f);
        assert!(rel_err(g.wrt(v).unwrap(), &num) < 1e-4);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = rand_tensor(&mut rng, &[8, 5]);
            let b = rand_tensor(&mut rng, &[5, 3]);
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(&a), t.leaf(&b));
            let c = t.matmul(va, vb).unwrap();
            let c = t.unary(Unary::Softplus, c).unwrap();
            let l = t.logsumexp(c).unwrap();
            let s = t.sum(l).unwrap();
            let g = t.backward(s).unwrap();
            (
                t.value(s).to_vec(),
                g.wrt(va).unwrap().to_vec(),
                g.wrt(vb).unwrap().to_vec(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.2.iter().zip(&b.2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
