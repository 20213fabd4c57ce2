use hydra::micronet::gradcheck::check_gradients;
use hydra::micronet::{DenseBlock, LayerSpec, Network, ResidualBlock};
use hydra::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense(inputs: usize, units: usize) -> LayerSpec {
    LayerSpec::Dense { inputs, units }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Builds `layers` followed by flatten and a dense classifier sized from the
/// running shape, then fills every parameter with small random values.
/// Metadata joins the first dense layer, which already counts it when it
/// appears in `layers`.
fn random_net(
    rng: &mut ChaCha8Rng,
    input: Vec<usize>,
    metadata: usize,
    mut layers: Vec<LayerSpec>,
    classes: usize,
) -> Network {
    let mut shape = input.clone();
    let mut pending = metadata;
    for l in &layers {
        if matches!(l, LayerSpec::Dense { .. }) {
            shape[0] += std::mem::take(&mut pending);
        }
        shape = l.output_shape(&shape, "probe").unwrap();
    }
    if shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    let flat: usize = shape.iter().product();
    layers.push(dense(flat + pending, classes));
    let mut net = Network::new(input, metadata, layers).unwrap();
    for p in net.params_mut() {
        *p = random_tensor(rng, p.shape(), 0.5);
    }
    net
}

fn assert_gradients(net: &Network, rng: &mut ChaCha8Rng, dropout: Option<u64>) {
    let pixels = random_tensor(rng, net.input_shape(), 1.0);
    let metadata: Vec<f64> = (0..net.metadata_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..net.classes()).map(|_| rng.random_range(0.5..2.0)).collect();
    let target = rng.random_range(0..net.classes());
    let report = check_gradients(net, &pixels, &metadata, target, &weights, dropout, 1e-5).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.max_relative_error() < 1e-6,
        "worst component {:?}, relative error {:e}",
        report.worst,
        report.max_relative_error()
    );
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let net = random_net(
            &mut rng,
            vec![6],
            3,
            vec![dense(9, 7), LayerSpec::Relu, dense(7, 5), LayerSpec::Relu],
            4,
        );
        assert_gradients(&net, &mut rng, None);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stride in [1, 2] {
        let net = random_net(
            &mut rng,
            vec![5, 6, 2],
            2,
            vec![
                conv(2, 3, 3, stride),
                LayerSpec::Relu,
                conv(3, 2, 1, 1),
                LayerSpec::Relu,
            ],
            3,
        );
        assert_gradients(&net, &mut rng, None);
    }
}

#[test]
fn residual_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = LayerSpec::ResidualBlock {
        inner: vec![LayerSpec::Relu, conv(3, 3, 3, 1), LayerSpec::Relu, conv(3, 3, 3, 1)],
    };
    let net = random_net(
        &mut rng,
        vec![4, 4, 2],
        0,
        vec![conv(2, 3, 3, 1), block, LayerSpec::Relu],
        3,
    );
    assert_gradients(&net, &mut rng, None);
}

#[test]
fn dense_block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = LayerSpec::DenseBlock {
        in_channels: 3,
        growth: 2,
        layers: 2,
        kernel: 3,
    };
    let net = random_net(
        &mut rng,
        vec![4, 4, 2],
        2,
        vec![conv(2, 3, 3, 1), block, LayerSpec::Relu],
        3,
    );
    assert_gradients(&net, &mut rng, None);
}

#[test]
fn gradients_hold_under_a_fixed_dropout_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(
        &mut rng,
        vec![8],
        0,
        vec![dense(8, 12), LayerSpec::Relu, LayerSpec::Dropout { rate: 0.5 }],
        3,
    );
    assert_gradients(&net, &mut rng, Some(99));
}

#[test]
fn two_layer_forward_matches_hand_unrolled_oracle() {
    let w1 = [
        [0.2, -0.5, 0.1, 0.4],
        [-0.3, 0.8, 0.05, -0.2],
        [0.6, 0.1, -0.7, 0.3],
        [0.05, -0.1, 0.2, 0.9],
        [-0.4, 0.25, 0.5, -0.6],
    ];
    let b1 = [0.1, -0.2, 0.0, 0.05];
    let w2 = [[0.3, -0.6, 0.2], [0.7, 0.1, -0.4], [-0.5, 0.9, 0.6], [0.2, 0.2, -0.8]];
    let b2 = [0.01, -0.02, 0.03];
    let x = [0.5, -1.0, 2.0];
    let meta = [0.3, -0.7];

    let mut net = Network::new(vec![3], 2, vec![dense(5, 4), LayerSpec::Relu, dense(4, 3)]).unwrap();
    let flat = |rows: &[[f64; 4]]| rows.iter().flatten().copied().collect::<Vec<_>>();
    net.set_params(vec![
        Tensor::new(vec![5, 4], flat(&w1)).unwrap(),
        Tensor::vector(b1.to_vec()),
        Tensor::new(vec![4, 3], w2.iter().flatten().copied().collect()).unwrap(),
        Tensor::vector(b2.to_vec()),
    ])
    .unwrap();

    let input: Vec<f64> = x.iter().chain(&meta).copied().collect();
    let mut hidden = [0.0; 4];
    for j in 0..4 {
        let mut s = b1[j];
        for i in 0..5 {
            s += input[i] * w1[i][j];
        }
        hidden[j] = s.max(0.0);
    }
    let mut oracle = [0.0; 3];
    for k in 0..3 {
        let mut s = b2[k];
        for j in 0..4 {
            s += hidden[j] * w2[j][k];
        }
        oracle[k] = s;
    }
    // recorded once from the oracle above
    let golden = [0.9565, -0.869, -0.963];

    let scores = net.forward(&Tensor::vector(x.to_vec()), &meta, false, 0).unwrap();
    for k in 0..3 {
        assert!((scores[k] - oracle[k]).abs() < 1e-12, "{scores:?} vs {oracle:?}");
        assert!((scores[k] - golden[k]).abs() < 1e-12, "{scores:?} vs {golden:?}");
    }
}

#[test]
fn conv_forward_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w, c, o, k) = (5, 4, 2, 3, 3);
    for stride in [1, 2] {
        let mut net = Network::new(vec![h, w, c], 0, vec![conv(c, o, k, stride), LayerSpec::Flatten]).unwrap();
        let weights = random_tensor(&mut rng, &[k * k * c, o], 1.0);
        let bias = random_tensor(&mut rng, &[o], 1.0);
        net.set_params(vec![weights.clone(), bias.clone()]).unwrap();
        let x = random_tensor(&mut rng, &[h, w, c], 1.0);
        let scores = net.forward(&x, &[], false, 0).unwrap();

        let pad = (k / 2) as isize;
        let (oh, ow) = ((h + 2 * (k / 2) - k) / stride + 1, (w + 2 * (k / 2) - k) / stride + 1);
        assert_eq!(scores.len(), oh * ow * o);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..o {
                    let mut s = bias.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * stride + ky) as isize - pad, (ox * stride + kx) as isize - pad);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                s += x.at3(iy as usize, ix as usize, ci)
                                    * weights.data()[((ky * k + kx) * c + ci) * o + co];
                            }
                        }
                    }
                    let got = scores[(oy * ow + ox) * o + co];
                    assert!((got - s).abs() < 1e-12, "({oy},{ox},{co}): {got} vs {s}");
                }
            }
        }
    }
}

#[test]
fn zero_residual_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let block = ResidualBlock::new(vec![conv(3, 3, 3, 1), LayerSpec::Relu, conv(3, 3, 3, 1)], &[4, 4, 3]).unwrap();
    let x = random_tensor(&mut rng, &[4, 4, 3], 1.0);
    assert_eq!(block.forward(&x).unwrap(), x);
}

#[test]
fn identity_residual_branch_doubles_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut block = ResidualBlock::new(vec![conv(2, 2, 1, 1)], &[3, 3, 2]).unwrap();
    block.params_mut()[0] = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = random_tensor(&mut rng, &[3, 3, 2], 1.0);
    let y = block.forward(&x).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn residual_block_equals_branch_plus_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut block = ResidualBlock::new(vec![conv(3, 3, 3, 1), LayerSpec::Relu, conv(3, 3, 3, 1)], &[4, 5, 3]).unwrap();
    for p in block.params_mut() {
        *p = random_tensor(&mut rng, p.shape(), 0.5);
    }
    let x = random_tensor(&mut rng, &[4, 5, 3], 1.0);
    let f = block.branch(&x).unwrap();
    let y = block.forward(&x).unwrap();
    for ((yi, fi), xi) in y.data().iter().zip(f.data()).zip(x.data()) {
        assert!((yi - (fi + xi)).abs() < 1e-12);
    }
}

#[test]
fn residual_branch_must_preserve_shape() {
    assert!(ResidualBlock::new(vec![conv(3, 4, 3, 1)], &[4, 4, 3]).is_err());
}

#[test]
fn empty_dense_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = DenseBlock::new(3, 4, 0, 3);
    let x = random_tensor(&mut rng, &[4, 4, 3], 1.0);
    assert_eq!(block.forward(&x).unwrap(), x);
}

#[test]
fn dense_block_concatenates_previous_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, g) = (3, 2);
    let mut block = DenseBlock::new(c, g, 2, 3);
    for p in block.params_mut() {
        *p = random_tensor(&mut rng, p.shape(), 0.5);
    }
    let x = random_tensor(&mut rng, &[4, 4, c], 1.0);
    let (y, inputs) = block.forward_traced(&x).unwrap();
    assert_eq!(y.shape(), &[4, 4, c + 2 * g]);
    assert_eq!(inputs.len(), 2);
    // unit 1 sees exactly the block input
    assert_eq!(inputs[0], x);
    // unit 2 sees [x, unit 1], which is also the leading part of the output
    assert_eq!(inputs[1].shape(), &[4, 4, c + g]);
    for y_ in 0..4 {
        for x_ in 0..4 {
            for ch in 0..c + g {
                assert_eq!(inputs[1].at3(y_, x_, ch), y.at3(y_, x_, ch));
            }
            for ch in 0..c {
                assert_eq!(y.at3(y_, x_, ch), x.at3(y_, x_, ch));
            }
        }
    }
}

#[test]
fn dense_block_rejects_wrong_channel_count() {
    let block = DenseBlock::new(3, 2, 1, 3);
    assert!(block.forward(&Tensor::zeros(&[4, 4, 2])).is_err());
}

#[test]
fn inverted_dropout_preserves_expected_activation() {
    let width = 8;
    let mut identity = vec![0.0; width * width];
    for i in 0..width {
        identity[i * width + i] = 1.0;
    }
    let mut net = Network::new(
        vec![width],
        0,
        vec![LayerSpec::Dropout { rate: 0.5 }, dense(width, width)],
    )
    .unwrap();
    net.params_mut()[0] = Tensor::new(vec![width, width], identity).unwrap();
    let x = Tensor::vector((1..=width).map(|i| i as f64 / 4.0).collect());
    let eval = net.forward(&x, &[], false, 0).unwrap();
    let draws = 40_000;
    let mut sum = vec![0.0; width];
    for seed in 0..draws {
        let s = net.forward(&x, &[], true, seed).unwrap();
        for (acc, v) in sum.iter_mut().zip(s.iter()) {
            *acc += v;
        }
    }
    for (i, total) in sum.iter().enumerate() {
        let mean = total / draws as f64;
        assert!(
            ((mean - eval[i]) / eval[i]).abs() < 0.02,
            "unit {i}: {mean} vs {}",
            eval[i]
        );
    }
}
