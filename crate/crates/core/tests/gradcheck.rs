//! Central finite differences against the hand-written backward passes.

use microrecon::tensor::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, leaky_relu, leaky_relu_backward,
    BatchNormParams, ConvLayerParams, Tensor5,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `L = Σ w · f(x)` for fixed random weights `w`.
fn weighted_sum(y: &Tensor5, w: &Tensor5) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    assert!(
        (analytic - numeric).abs() / scale < TOL,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

fn central(f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    central_with(f, x0, H)
}

fn central_with(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor([2, 2, 4, 5, 4], &mut rng);
    let mut p = ConvLayerParams::zeros(3, 2, 3);
    p.kernel.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let y = conv3d_forward(&x, &p).unwrap();
    let w = random_tensor(y.shape(), &mut rng);
    let g = conv3d_backward(&x, &p, &w, true).unwrap();
    let gx = g.input.unwrap();

    for i in (0..x.data().len()).step_by(7) {
        let num = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                weighted_sum(&conv3d_forward(&xp, &p).unwrap(), &w)
            },
            x.data()[i],
        );
        assert_close(gx.data()[i], num, "dx");
    }
    for i in (0..p.kernel.len()).step_by(5) {
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.kernel[i] = v;
                weighted_sum(&conv3d_forward(&x, &pp).unwrap(), &w)
            },
            p.kernel[i],
        );
        assert_close(g.kernel[i], num, "dK");
    }
    for i in 0..p.bias.len() {
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.bias[i] = v;
                weighted_sum(&conv3d_forward(&x, &pp).unwrap(), &w)
            },
            p.bias[i],
        );
        assert_close(g.bias[i], num, "db");
    }
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor([2, 3, 2, 3, 2], &mut rng);
    let mut p = BatchNormParams::new(3, 0.1, 1e-5);
    p.gamma = vec![1.3, -0.7, 0.4];
    p.beta = vec![0.2, 0.0, -0.5];
    let (y, cache) = batchnorm_forward(&x, &mut p.clone(), true).unwrap();
    let w = random_tensor(y.shape(), &mut rng);
    let (gx, gg, gb) = batchnorm_backward(&cache.unwrap(), &w).unwrap();
    let loss = |x: &Tensor5, p: &BatchNormParams| weighted_sum(&batchnorm_forward(x, &mut p.clone(), true).unwrap().0, &w);

    for i in 0..x.data().len() {
        let num = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                loss(&xp, &p)
            },
            x.data()[i],
        );
        assert_close(gx.data()[i], num, "dx");
    }
    for c in 0..3 {
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.gamma[c] = v;
                loss(&x, &pp)
            },
            p.gamma[c],
        );
        assert_close(gg[c], num, "dgamma");
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.beta[c] = v;
                loss(&x, &pp)
            },
            p.beta[c],
        );
        assert_close(gb[c], num, "dbeta");
    }
}

#[test]
fn leaky_relu_gradients_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor5::from_fn([1, 2, 2, 2, 3], |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    });
    let w = random_tensor(x.shape(), &mut rng);
    let gx = leaky_relu_backward(&x, 0.2, &w);
    for i in 0..x.data().len() {
        let num = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                weighted_sum(&leaky_relu(&xp, 0.2), &w)
            },
            x.data()[i],
        );
        assert_close(gx.data()[i], num, "dx");
    }
}

/// Sign of every block activation; a central difference is only valid when
/// both probes share the base point's pattern (no LeakyReLU kink crossed).
fn sign_pattern(p: &microrecon::network::ModelParams, x: &Tensor5) -> Vec<bool> {
    let trace = p.clone().forward_train(x).unwrap();
    trace.block_outputs().iter().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect()
}

#[test]
fn network_gradients_l2c4() {
    // Batch norm keeps hundreds of pre-activations at unit scale, so a 1e-3
    // probe crosses a kink on most coordinates; a smaller step avoids them.
    const NET_H: f64 = 1e-6;
    use microrecon::network::{init_params, NetworkSpec};
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor5::from_fn([1, 1, 7, 7, 7], |_| rng.random::<f64>());
    let mut params = init_params(NetworkSpec::new(2, 4).unwrap(), 21).unwrap();
    for b in &mut params.blocks {
        b.conv.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        b.bn.gamma.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        b.bn.beta.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let loss = |p: &microrecon::network::ModelParams| -> f64 {
        p.clone().forward_train(&x).unwrap().output().data().iter().sum()
    };
    let mut p = params.clone();
    let trace = p.forward_train(&x).unwrap();
    let ones = Tensor5::from_fn(trace.output().shape(), |_| 1.0);
    let grads = params.backward(&trace, &ones).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let base_pattern = sign_pattern(&params, &x);

    let (mut checked, mut kinked) = (0, 0);
    for a in 0..analytic.len() {
        let len = analytic[a].len();
        for i in (0..len).step_by(len.div_ceil(12)) {
            let mut q = params.clone();
            let x0 = q.trainable_mut()[a][i];
            let smooth = [x0 - NET_H, x0 + NET_H].iter().all(|&v| {
                q.trainable_mut()[a][i] = v;
                sign_pattern(&q, &x) == base_pattern
            });
            if !smooth {
                kinked += 1;
                continue;
            }
            let num = central_with(
                |v| {
                    q.trainable_mut()[a][i] = v;
                    loss(&q)
                },
                x0,
                NET_H,
            );
            assert_close(analytic[a][i], num, &format!("array {a} index {i}"));
            checked += 1;
        }
    }
    assert!(kinked * 10 <= checked, "{kinked} of {} probes crossed a kink", checked + kinked);
}

mod losses {
    use super::*;
    use microrecon::losses::{
        acf_loss, gram_loss, AcfTargets, FeatureBank, FeatureBankConfig, GramTargets, Orientation, References, SlicePlane,
    };
    use microrecon::volume::Image2D;

    fn reference(seed: u64) -> References {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        References::Isotropic(Image2D::from_fn(8, 8, |_, _| rng.random_bool(0.4)).unwrap())
    }

    fn slices(seed: u64) -> Vec<SlicePlane> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Orientation::ALL
            .iter()
            .map(|&o| SlicePlane { orientation: o, index: 0, data: random_tensor([1, 3, 1, 8, 8], &mut rng) })
            .collect()
    }

    fn with_value(s: &[SlicePlane], k: usize, i: usize, v: f64) -> Vec<SlicePlane> {
        let mut s = s.to_vec();
        s[k].data.data_mut()[i] = v;
        s
    }

    #[test]
    fn gram_loss_gradient() {
        let cfg = FeatureBankConfig { widths: vec![4, 6], seed: 3, ..Default::default() };
        let bank = FeatureBank::new(&cfg, 3).unwrap();
        let targets = GramTargets::new(&bank, &reference(1)).unwrap();
        let s = slices(2);
        let (_, grads) = gram_loss(&s, &targets, &bank).unwrap();
        let pattern = |s: &[SlicePlane]| -> Vec<bool> {
            s.iter().flat_map(|p| bank.features(&p.data).unwrap()).flat_map(|f| f.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
        };
        let base = pattern(&s);
        let (mut checked, mut kinked) = (0, 0);
        for k in 0..3 {
            for i in (0..s[k].data.data().len()).step_by(5) {
                let x0 = s[k].data.data()[i];
                if pattern(&with_value(&s, k, i, x0 + H)) != base || pattern(&with_value(&s, k, i, x0 - H)) != base {
                    kinked += 1;
                    continue;
                }
                let num = central(|v| gram_loss(&with_value(&s, k, i, v), &targets, &bank).unwrap().0, x0);
                assert_close(grads[k].data()[i], num, "gram slice grad");
                checked += 1;
            }
        }
        assert!(kinked * 10 <= checked, "{kinked} kinked probes");
    }

    #[test]
    fn acf_loss_gradient() {
        let targets = AcfTargets::new(&reference(4), 4).unwrap();
        let s = slices(5);
        let (loss, grads) = acf_loss(&s, &targets).unwrap();
        assert!(loss >= 0.0);
        for k in 0..3 {
            for i in (0..s[k].data.data().len()).step_by(3) {
                let x0 = s[k].data.data()[i];
                let num = central(|v| acf_loss(&with_value(&s, k, i, v), &targets).unwrap().0, x0);
                assert_close(grads[k].data()[i], num, "acf slice grad");
            }
        }
    }
}
