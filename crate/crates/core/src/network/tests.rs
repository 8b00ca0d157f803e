use super::*;
use crate::ops::testing::{random_tensor, rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn tiny_spec() -> NetSpec {
    NetSpec {
        in_slices: 5,
        num_classes: 3,
        level_channels: vec![4, 8],
        encoder_convs: vec![2, 1],
        decoder_convs: vec![1],
        downsample: Downsample::StridedConv,
        crop_train: 16,
    }
}

fn three_level_spec() -> NetSpec {
    NetSpec {
        in_slices: 5,
        num_classes: 2,
        level_channels: vec![4, 6, 8],
        encoder_convs: vec![1, 2, 1],
        decoder_convs: vec![2, 1],
        downsample: Downsample::StridedConv,
        crop_train: 16,
    }
}

fn projected_loss(net: &mut Network<f64>, x: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    let (y, _) = net.forward_train(x).unwrap();
    y.data().iter().zip(proj.data()).map(|(a, p)| a * p).sum()
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_network::<f32>(&tiny_spec(), 7).unwrap();
    let b = build_network::<f32>(&tiny_spec(), 7).unwrap();
    let c = build_network::<f32>(&tiny_spec(), 8).unwrap();
    let bits = |n: &Network<f32>| -> Vec<u32> {
        n.params()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn parameter_names_are_unique_and_counted() {
    let net = build_network::<f32>(&NetSpec::default(), 0).unwrap();
    let names: std::collections::HashSet<_> = net.params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), net.params().len());
    assert_eq!(net.weighted_layer_count(), 32);
    assert_eq!(net.parameter_count(), NetSpec::default().parameter_count());
}

#[test]
fn output_matches_input_size_and_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [tiny_spec(), three_level_spec()] {
        let mut net = build_network::<f32>(&spec, 3).unwrap();
        for (h, w) in [(16, 16), (32, 48)] {
            let x: Tensor<f32> = random_tensor(&mut rng, Dims::new(2, 5, h, w));
            let (y, cache) = net.forward(&x, Mode::Train).unwrap();
            assert!(cache.is_some());
            assert_eq!(y.dims(), Dims::new(2, spec.num_classes, h, w));
            let (y, cache) = net.forward(&x, Mode::Eval).unwrap();
            assert!(cache.is_none());
            assert_eq!(y.dims(), Dims::new(2, spec.num_classes, h, w));
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = build_network::<f32>(&three_level_spec(), 3).unwrap();
    let x: Tensor<f32> = random_tensor(&mut rng, Dims::new(1, 5, 32, 32));
    net.forward_train(&x).unwrap();
    let a = net.forward_eval(&x).unwrap();
    let b = net.forward_eval(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn eval_before_training_is_usage_error() {
    let net = build_network::<f32>(&tiny_spec(), 0).unwrap();
    let err = net.forward_eval(&Tensor::zeros(Dims::new(1, 5, 16, 16))).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn indivisible_input_suggests_valid_size() {
    let net = build_network::<f32>(&three_level_spec(), 0).unwrap();
    let msg = net.forward_eval(&Tensor::zeros(Dims::new(1, 5, 30, 21))).unwrap_err().to_string();
    assert!(msg.contains("divisible by 4") && msg.contains("32x20"), "{msg}");
    let msg = net.forward_eval(&Tensor::zeros(Dims::new(1, 3, 16, 16))).unwrap_err().to_string();
    assert!(msg.contains("5 channels"), "{msg}");
}

#[test]
fn encoder_level_dims_and_concat_doubling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = build_network::<f32>(&three_level_spec(), 0).unwrap();
    let x: Tensor<f32> = random_tensor(&mut rng, Dims::new(1, 5, 32, 32));
    net.forward_train(&x).unwrap();
    let feats = net.encoder_features(&x).unwrap();
    assert_eq!(feats[1].dims(), Dims::new(1, 6, 16, 16));
    assert_eq!(feats[2].dims(), Dims::new(1, 8, 8, 8));
    assert_eq!(net.encoder_output_dims(x.dims(), 1), feats[1].dims());
}

#[test]
fn zero_upstream_gives_zero_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = build_network::<f64>(&tiny_spec(), 0).unwrap();
    let x: Tensor<f64> = random_tensor(&mut rng, Dims::new(2, 5, 16, 16));
    let (y, cache) = net.forward_train(&x).unwrap();
    net.backward(cache, &Tensor::zeros(y.dims())).unwrap();
    assert!(net.params().iter().all(|(_, p)| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn stale_cache_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = build_network::<f64>(&tiny_spec(), 0).unwrap();
    let x: Tensor<f64> = random_tensor(&mut rng, Dims::new(1, 5, 16, 16));
    let (y, cache) = net.forward_train(&x).unwrap();
    net.params_mut()[0].1.value.data_mut()[0] += 1.0;
    assert!(matches!(net.backward(cache, &y), Err(Error::Usage(_))));

    let mut other = build_network::<f64>(&tiny_spec(), 0).unwrap();
    let (y, cache) = net.forward_train(&x).unwrap();
    assert!(matches!(other.backward(cache, &y), Err(Error::Usage(_))));
}

#[test]
fn identical_builds_give_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Tensor<f32> = random_tensor(&mut rng, Dims::new(2, 5, 16, 16));
    let grads = |seed| -> Vec<u32> {
        let mut net = build_network::<f32>(&three_level_spec(), seed).unwrap();
        let (y, cache) = net.forward_train(&x).unwrap();
        net.backward(cache, &y).unwrap();
        net.params()
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(grads(11), grads(11));
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for spec in [tiny_spec(), three_level_spec()] {
        let mut net = build_network::<f64>(&spec, 9).unwrap();
        let x: Tensor<f64> = random_tensor(&mut rng, Dims::new(2, 5, 16, 16));
        let (y, cache) = net.forward_train(&x).unwrap();
        let proj: Tensor<f64> = random_tensor(&mut rng, y.dims());
        net.backward(cache, &proj).unwrap();
        let analytic: Vec<f64> = net.params().iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();

        let eps = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        let n_params = net.params().len();
        for pi in 0..n_params {
            let len = net.params()[pi].1.value.len();
            for i in 0..len {
                let orig = net.params()[pi].1.value.data()[i];
                net.params_mut()[pi].1.value.data_mut()[i] = orig + eps;
                let up = projected_loss(&mut net, &x, &proj);
                net.params_mut()[pi].1.value.data_mut()[i] = orig - eps;
                let down = projected_loss(&mut net, &x, &proj);
                net.params_mut()[pi].1.value.data_mut()[i] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }
}
