//! Network definitions: the random-field potential and the directed generator.

mod io;
mod layers;
mod model;
mod params;
mod presets;

pub use io::{Block, Container};
pub use layers::{
    Activation, BatchNormLayer, BatchStats, DenseLayer, Forward, Layer, LayerSpec, Mlp, NormMode,
};
pub use model::{EnergyModel, Generator};
pub use params::{ParamGrads, Parameterized};
pub use presets::{preset, NetPreset, PRESET_NAMES};

pub(crate) use model::{argmax, softmax_rows};
pub(crate) use params::collect_grads;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};
    use crate::testutil::{central_diff, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn linear(input: usize, output: usize, weight: Vec<f64>, bias: Vec<f64>) -> EnergyModel {
        let mut m = EnergyModel::from_specs(
            &[LayerSpec::Dense {
                input,
                output,
                weight_norm: false,
                activation: Activation::Identity,
            }],
            &mut rng(0),
        )
        .unwrap();
        let Layer::Dense(d) = &mut m.net.layers[0] else { unreachable!() };
        d.weight.data_mut().copy_from_slice(&weight);
        d.bias.data_mut().copy_from_slice(&bias);
        m
    }

    fn zero_effective_weights(net: &mut Mlp) {
        for l in &mut net.layers {
            if let Layer::Dense(d) = l {
                match &mut d.gain {
                    Some(g) => g.data_mut().iter_mut().for_each(|v| *v = 0.0),
                    None => d.weight.data_mut().iter_mut().for_each(|v| *v = 0.0),
                }
                d.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn random_x(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new([n, d], (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weight_net_outputs_zero() {
        let mut m = EnergyModel::mlp(2, &[100, 100], 3, Activation::LEAKY_RELU, &mut rng(1)).unwrap();
        zero_effective_weights(&mut m.net);
        let x = random_x(&mut rng(2), 5, 2);
        let u = m.energy_joint(&x).unwrap();
        assert_eq!(u.shape(), &[5, 3]);
        assert!(u.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let m = linear(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let x = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(m.energy_joint(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let m = EnergyModel::mlp(2, &[4], 1, Activation::LEAKY_RELU, &mut rng(1)).unwrap();
        let x = Tensor::zeros([3, 5]);
        assert!(matches!(m.energy_joint(&x), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for k in [1, 2, 10] {
            let m = EnergyModel::mlp(2, &[100, 100], k, Activation::LEAKY_RELU, &mut rng(k as u64)).unwrap();
            let x = random_x(&mut rng(40 + k as u64), 4, 2);
            for class in [None, Some(k - 1)] {
                let (g, _) = m.grad_x(&x, class).unwrap();
                let num = central_diff(&x, 1e-6, |x| {
                    let u = match class {
                        None => m.energy_marginal(x).unwrap(),
                        Some(c) => {
                            let j = m.energy_joint(x).unwrap();
                            (0..j.rows()).map(|i| j.row(i)[c]).collect()
                        }
                    };
                    u.iter().sum()
                });
                assert!(rel_err(g.data(), &num) < 1e-4, "k={k} class={class:?}");
            }
        }
    }

    #[test]
    fn marginal_of_zero_logits_is_log_k() {
        let mut m = EnergyModel::mlp(3, &[8], 10, Activation::LEAKY_RELU, &mut rng(3)).unwrap();
        zero_effective_weights(&mut m.net);
        let u = m.energy_marginal(&Tensor::zeros([2, 3])).unwrap();
        for v in u {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_with_one_class_is_the_joint() {
        let m = EnergyModel::mlp(2, &[16], 1, Activation::LEAKY_RELU, &mut rng(4)).unwrap();
        let x = random_x(&mut rng(5), 7, 2);
        let j = m.energy_joint(&x).unwrap();
        assert_eq!(m.energy_marginal(&x).unwrap(), j.data());
    }

    #[test]
    fn marginal_matches_naive_sum() {
        let m = EnergyModel::mlp(2, &[32, 32], 5, Activation::LEAKY_RELU, &mut rng(6)).unwrap();
        let x = random_x(&mut rng(7), 9, 2);
        let j = m.energy_joint(&x).unwrap();
        let u = m.energy_marginal(&x).unwrap();
        for i in 0..9 {
            let naive: f64 = j.row(i).iter().map(|v| v.exp()).sum();
            assert!((u[i].exp() - naive).abs() < 1e-12 * naive.max(1.0));
        }
    }

    #[test]
    fn posterior_values_and_shift_invariance() {
        let m = linear(1, 4, vec![0.0; 4], vec![0.0; 4]);
        let p = m.class_posterior(&Tensor::zeros([3, 1])).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let m = linear(1, 2, vec![0.0; 2], vec![10.0, 0.0]);
        let p = m.class_posterior(&Tensor::zeros([1, 1])).unwrap();
        assert!((p.data()[0] - 0.999_954_602_131_297_6).abs() < 1e-12);
        assert!((p.data()[1] - 4.539_786_870_243_44e-5).abs() < 1e-12);

        let mut r = rng(8);
        let m = EnergyModel::mlp(2, &[16], 3, Activation::LEAKY_RELU, &mut r).unwrap();
        let x = random_x(&mut r, 6, 2);
        let p = m.class_posterior(&x).unwrap();
        let mut shifted = m.clone();
        if let Some(Layer::Dense(d)) = shifted.net.layers.last_mut() {
            d.bias.data_mut().iter_mut().for_each(|v| *v += 7.5);
        }
        let q = shifted.class_posterior(&x).unwrap();
        for i in 0..6 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(rel_err(p.data(), q.data()) < 1e-12);
        assert_eq!(m.predict(&x).unwrap(), shifted.predict(&x).unwrap());
    }

    #[test]
    fn predict_breaks_ties_toward_smallest_class() {
        let m = linear(1, 3, vec![0.0; 3], vec![1.0, 2.0, 2.0]);
        assert_eq!(m.predict(&Tensor::zeros([1, 1])).unwrap(), vec![1]);
    }

    #[test]
    fn weight_norm_is_invariant_to_direction_scale() {
        let mut r = rng(9);
        let m = EnergyModel::mlp(2, &[20, 20], 2, Activation::LEAKY_RELU, &mut r).unwrap();
        let x = random_x(&mut r, 5, 2);
        let mut scaled = m.clone();
        if let Layer::Dense(d) = &mut scaled.net.layers[1] {
            let cols = d.input_dim();
            for (i, row) in d.weight.data_mut().chunks_mut(cols).enumerate() {
                let c = 0.5 + i as f64;
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
        let a = m.energy_joint(&x).unwrap();
        let b = scaled.energy_joint(&x).unwrap();
        assert!(rel_err(a.data(), b.data()) < 1e-13);
    }

    #[test]
    fn batch_norm_train_mode_standardizes_columns() {
        let mut r = rng(10);
        let mut bn = BatchNormLayer::new(4, Activation::Identity);
        bn.eps = 0.0;
        let net = Mlp {
            layers: vec![Layer::BatchNorm(bn)],
        };
        let x = Tensor::new([50, 4], (0..200).map(|_| r.random_range(-3.0..5.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant_ref(&x);
        let f = net.forward(&mut tape, xv, NormMode::Train, false).unwrap();
        let y = tape.to_tensor(f.out);
        for j in 0..4 {
            let col: Vec<f64> = (0..50).map(|i| y.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
        assert_eq!(f.bn_stats.len(), 1);
        assert!(f.bn_stats[0].var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn generate_noise_free_with_zero_decoder_gives_biases() {
        let mut g = Generator::mlp(2, &[8], 3, Activation::Softplus, Activation::Identity, 0.05, &mut rng(11)).unwrap();
        zero_effective_weights(&mut g.net);
        let (h, x) = g.generate(4, &mut rng(12), false, NormMode::Inference).unwrap();
        assert_eq!(h.shape(), &[4, 2]);
        assert!(x.data().iter().all(|v| *v == 0.0));
        assert!(g.generate(0, &mut rng(12), false, NormMode::Inference).is_err());
    }

    #[test]
    fn latent_prior_is_standard_normal() {
        let mut g = Generator::mlp(2, &[4], 2, Activation::Softplus, Activation::Identity, 0.05, &mut rng(13)).unwrap();
        let (h, _) = g.generate(100_000, &mut rng(14), false, NormMode::Inference).unwrap();
        for j in 0..2 {
            let mean = (0..100_000).map(|i| h.row(i)[j]).sum::<f64>() / 1e5;
            assert!(mean.abs() < 0.02, "coordinate {j} mean {mean}");
        }
    }

    #[test]
    fn observation_noise_has_variance_sigma_squared() {
        let mut g = Generator::mlp(2, &[8], 3, Activation::Softplus, Activation::Identity, 0.05, &mut rng(15)).unwrap();
        let mut r1 = rng(16);
        let mut r2 = rng(16);
        let (h, x) = g.generate(20_000, &mut r1, true, NormMode::Inference).unwrap();
        let (h2, clean) = g.generate(20_000, &mut r2, false, NormMode::Inference).unwrap();
        assert_eq!(h, h2);
        let mse = x
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (20_000.0 * 3.0);
        assert!((mse / 0.0025 - 1.0).abs() < 0.05, "mse {mse}");
    }

    #[test]
    fn log_q_at_decoder_mode() {
        let mut r = rng(17);
        let mut g = Generator::mlp(2, &[6], 2, Activation::Softplus, Activation::Identity, 1.0, &mut r).unwrap();
        let (h, x) = g.generate(3, &mut r, false, NormMode::Inference).unwrap();
        let lq = g.log_q_joint(&x, &h, NormMode::Inference).unwrap();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for i in 0..3 {
            let hh: f64 = h.row(i).iter().map(|v| v * v).sum();
            assert!((lq[i] - (-0.5 * hh - ln2pi - ln2pi)).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_sigma_shifts_log_likelihood_analytically() {
        let mut r = rng(18);
        let g = Generator::mlp(2, &[6], 3, Activation::Softplus, Activation::Identity, 0.3, &mut r).unwrap();
        let h = random_x(&mut r, 4, 2);
        let x = random_x(&mut r, 4, 3);
        let mut g2 = g.clone();
        g2.sigma = 0.6;
        let a = g.log_q_joint(&x, &h, NormMode::Inference).unwrap();
        let b = g2.log_q_joint(&x, &h, NormMode::Inference).unwrap();
        let gh = g.decode(&h, NormMode::Inference).unwrap();
        for i in 0..4 {
            let r2: f64 = x.row(i).iter().zip(gh.row(i)).map(|(p, q)| (p - q).powi(2)).sum();
            let expected = r2 * 3.0 / (8.0 * 0.09) - 3.0 * 2f64.ln();
            assert!((b[i] - a[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn nonpositive_sigma_is_config_error() {
        let mut g = Generator::mlp(2, &[4], 2, Activation::Softplus, Activation::Identity, 0.1, &mut rng(19)).unwrap();
        g.sigma = 0.0;
        let h = Tensor::zeros([1, 2]);
        let x = Tensor::zeros([1, 2]);
        assert!(matches!(g.log_q_joint(&x, &h, NormMode::Inference), Err(crate::Error::Config(_))));
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let mut r = rng(20);
        let g = Generator::mlp(2, &[5, 5], 2, Activation::Softplus, Activation::Identity, 0.5, &mut r).unwrap();
        let h = random_x(&mut r, 6, 2);
        let x = random_x(&mut r, 6, 2);
        for mode in [NormMode::Train, NormMode::Inference] {
            let (grads, _) = g.mean_log_q_grad(&x, &h, mode).unwrap();
            for (pi, block) in grads.blocks.iter().enumerate() {
                let p0 = g.params()[pi].clone();
                let num = central_diff(&p0, 1e-6, |p| {
                    let mut gg = g.clone();
                    *gg.params_mut()[pi] = p.clone();
                    let lq = gg.log_q_joint(&x, &h, mode).unwrap();
                    lq.iter().sum::<f64>() / lq.len() as f64
                });
                assert!(rel_err(block, &num) < 1e-4, "param {pi} {mode:?}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(21);
        let (e, mut g) = preset("toy2circ").unwrap().build(&mut r).unwrap();
        // move the running statistics off their defaults
        g.generate(32, &mut r, false, NormMode::Train).unwrap();
        e.save(&dir.path().join("e.bin")).unwrap();
        g.save(&dir.path().join("g.bin")).unwrap();
        let e2 = EnergyModel::load(&dir.path().join("e.bin")).unwrap();
        let g2 = Generator::load(&dir.path().join("g.bin")).unwrap();
        assert_eq!(e, e2);
        assert_eq!(g, g2);
        let x = random_x(&mut r, 10, 2);
        let a = e.energy_joint(&x).unwrap();
        let b = e2.energy_joint(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupt_checkpoint_reports_offset() {
        let mut r = rng(22);
        let (e, _) = preset("toy32").unwrap().build(&mut r).unwrap();
        let mut buf = Vec::new();
        e.to_container().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        match Container::read_from(&buf[..]) {
            Err(crate::Error::Format { offset, .. }) => assert!(offset > 20),
            other => panic!("expected format error, got {other:?}"),
        }
        buf[0] = b'X';
        assert!(matches!(Container::read_from(&buf[..]), Err(crate::Error::Format { offset: 0, .. })));
    }

    #[test]
    fn presets_have_expected_shapes() {
        let mut r = rng(23);
        let (e, g) = preset("mnist-mlp").unwrap().build(&mut r).unwrap();
        assert_eq!((e.input_dim(), e.classes()), (784, 10));
        assert_eq!((g.latent_dim(), g.output_dim()), (100, 784));
        let (e, g) = preset("toy32").unwrap().build(&mut r).unwrap();
        assert_eq!((e.input_dim(), e.classes(), g.latent_dim()), (2, 1, 2));
        assert!(preset("cifar").is_err());
    }
}
