use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    // Bounded away from zero so relu kinks and pooling ties stay out of reach
    // of the finite-difference step.
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks backward against central differences for the scalar loss
/// `<c, forward(x)>` over every parameter and input entry.
fn fd_check(graph: &ModelGraph, ext: &[&PoolSwitches], batch: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut params = graph.init_params(&mut r);
    for t in params.tensors_mut() {
        *t = random_tensor(t.shape(), &mut r);
    }
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(graph.input_shape());
    let x = random_tensor(&in_shape, &mut r);
    let trace = forward_with(graph, params.tensors(), &x, ext).unwrap();
    let c = random_tensor(trace.output().shape(), &mut r);
    let mut inj = vec![None; graph.layers().len()];
    let g = backward_with(graph, params.tensors(), &trace, Some(c.clone()), &mut inj, ext, true).unwrap();

    let loss = |p: &[Tensor], x: &Tensor| dot(&c, forward_with(graph, p, x, ext).unwrap().output());
    let mut pairs = Vec::new();
    for (ti, t) in params.tensors().iter().enumerate() {
        for k in 0..t.len() {
            let num = central_difference(
                |v| {
                    let mut p = params.tensors().to_vec();
                    p[ti].data_mut()[k] = v;
                    loss(&p, &x)
                },
                t.data()[k],
                FD_STEP,
            );
            pairs.push((g.params[ti].data()[k], num));
        }
    }
    let dx = g.input.unwrap();
    for k in 0..x.len() {
        let num = central_difference(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[k] = v;
                loss(params.tensors(), &xp)
            },
            x.data()[k],
            FD_STEP,
        );
        pairs.push((dx.data()[k], num));
    }
    max_relative_error(&pairs)
}

#[test]
fn relu_forward_definition() {
    let g = ModelGraph::new(vec![2], vec![LayerSpec::Relu]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
    let t = forward(&g, &ParamSet::new(), &x).unwrap();
    assert_eq!(t.output().data(), &[0.0, 2.0]);
}

#[test]
fn maxpool_in_graph_records_switch() {
    let g = ModelGraph::new(vec![1, 2, 2], vec![LayerSpec::MaxPool2x2]).unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let t = forward(&g, &ParamSet::new(), &x).unwrap();
    assert_eq!(t.output().data(), &[4.0]);
    assert_eq!(t.switches[0].as_ref().unwrap().positions(), &[3]);
}

#[test]
fn two_layer_dense_matches_hand_matmul() {
    let g = ModelGraph::new(
        vec![5],
        vec![
            LayerSpec::Dense { inputs: 5, outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 4, outputs: 3 },
        ],
    )
    .unwrap();
    let mut r = rng(11);
    let mut p = g.init_params(&mut r);
    for t in p.tensors_mut() {
        *t = random_tensor(t.shape(), &mut r);
    }
    let x = random_tensor(&[2, 5], &mut r);
    let out = forward(&g, &p, &x).unwrap();

    let (w1, b1, w2, b2) = (
        p.get("0.weight").unwrap().data(),
        p.get("0.bias").unwrap().data(),
        p.get("2.weight").unwrap().data(),
        p.get("2.bias").unwrap().data(),
    );
    for s in 0..2 {
        let xs = &x.data()[s * 5..(s + 1) * 5];
        let mut h = [0.0; 4];
        for o in 0..4 {
            let mut acc = b1[o];
            for i in 0..5 {
                acc += w1[o * 5 + i] * xs[i];
            }
            h[o] = if acc > 0.0 { acc } else { 0.0 };
        }
        for o in 0..3 {
            let mut acc = b2[o];
            for i in 0..4 {
                acc += w2[o * 4 + i] * h[i];
            }
            assert!((acc - out.output().data()[s * 3 + o]).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_weight_grad_is_outer_product() {
    let g = ModelGraph::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2 }]).unwrap();
    let p = g.init_params(&mut rng(1));
    let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let gout = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
    let trace = forward(&g, &p, &x).unwrap();
    let (grads, _) = backward(&g, &p, &trace, &gout).unwrap();
    assert_eq!(
        grads.get("0.weight").unwrap().data(),
        &[3.0, -6.0, 1.5, -1.0, 2.0, -0.5]
    );
    assert_eq!(grads.get("0.bias").unwrap().data(), &[3.0, -1.0]);
}

#[test]
fn relu_blocks_gradient_at_negative_preactivation() {
    let g = ModelGraph::new(vec![2], vec![LayerSpec::Relu]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![-0.5, 0.5]).unwrap();
    let trace = forward(&g, &ParamSet::new(), &x).unwrap();
    let (_, dx) = backward(&g, &ParamSet::new(), &trace, &Tensor::filled(&[1, 2], 1.0)).unwrap();
    assert_eq!(dx.data(), &[0.0, 1.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let g = ModelGraph::new(
        vec![2, 6, 6],
        vec![
            LayerSpec::Conv2d(ConvSpec::same(2, 3, 3)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 27, outputs: 4 },
        ],
    )
    .unwrap();
    let p = g.init_params(&mut rng(3));
    let x = random_tensor(&[3, 2, 6, 6], &mut rng(4));
    assert_eq!(forward(&g, &p, &x).unwrap(), forward(&g, &p, &x).unwrap());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let g = ModelGraph::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2 }]).unwrap();
    let p = g.init_params(&mut rng(1));
    assert!(forward(&g, &p, &Tensor::zeros(&[1, 4])).is_err());
}

#[test]
fn forward_surfaces_non_finite_values() {
    let g = ModelGraph::new(vec![2], vec![LayerSpec::Dense { inputs: 2, outputs: 1 }]).unwrap();
    let mut p = g.init_params(&mut rng(1));
    p.tensors_mut()[0].data_mut()[0] = f64::MAX;
    let x = Tensor::new(vec![1, 2], vec![f64::MAX, 0.0]).unwrap();
    assert!(matches!(forward(&g, &p, &x), Err(Error::NonFinite(_))));
}

#[test]
fn graph_rejects_zero_kernel() {
    let spec = ConvSpec {
        in_channels: 1,
        out_channels: 1,
        kernel_h: 0,
        kernel_w: 3,
        stride: 1,
        padding: 0,
    };
    assert!(ModelGraph::new(vec![1, 4, 4], vec![LayerSpec::Conv2d(spec)]).is_err());
}

#[test]
fn backward_rejects_trace_graph_mismatch() {
    let g1 = ModelGraph::new(vec![2], vec![LayerSpec::Relu]).unwrap();
    let g2 = ModelGraph::new(vec![2], vec![LayerSpec::Relu, LayerSpec::Relu]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let t = forward(&g1, &ParamSet::new(), &x).unwrap();
    assert!(backward(&g2, &ParamSet::new(), &t, &Tensor::zeros(&[1, 2])).is_err());
}

#[test]
fn fd_dense() {
    let g = ModelGraph::new(vec![4], vec![LayerSpec::Dense { inputs: 4, outputs: 3 }]).unwrap();
    assert!(fd_check(&g, &[], 3, 21) < 1e-5);
}

#[test]
fn fd_relu() {
    let g = ModelGraph::new(vec![7], vec![LayerSpec::Relu]).unwrap();
    assert!(fd_check(&g, &[], 2, 22) < 1e-5);
}

#[test]
fn fd_conv2d_same_and_strided() {
    let same = ModelGraph::new(vec![2, 5, 5], vec![LayerSpec::Conv2d(ConvSpec::same(2, 3, 3))]).unwrap();
    assert!(fd_check(&same, &[], 2, 23) < 1e-5);
    let strided = ConvSpec {
        in_channels: 2,
        out_channels: 2,
        kernel_h: 3,
        kernel_w: 2,
        stride: 2,
        padding: 1,
    };
    let g = ModelGraph::new(vec![2, 6, 5], vec![LayerSpec::Conv2d(strided)]).unwrap();
    assert!(fd_check(&g, &[], 2, 24) < 1e-5);
}

#[test]
fn fd_transposed_conv2d() {
    let same = ModelGraph::new(
        vec![3, 4, 4],
        vec![LayerSpec::TransposedConv2d(ConvSpec::same(3, 2, 5))],
    )
    .unwrap();
    assert!(fd_check(&same, &[], 2, 25) < 1e-5);
    let strided = ConvSpec {
        in_channels: 2,
        out_channels: 3,
        kernel_h: 3,
        kernel_w: 3,
        stride: 2,
        padding: 1,
    };
    let g = ModelGraph::new(vec![2, 3, 4], vec![LayerSpec::TransposedConv2d(strided)]).unwrap();
    assert_eq!(g.output_shape(), &[3, 5, 7]);
    assert!(fd_check(&g, &[], 1, 26) < 1e-5);
}

#[test]
fn fd_maxpool() {
    let g = ModelGraph::new(vec![2, 4, 6], vec![LayerSpec::MaxPool2x2]).unwrap();
    assert!(fd_check(&g, &[], 2, 27) < 1e-5);
}

#[test]
fn fd_unpool() {
    let mut r = rng(28);
    let pre = random_tensor(&[2, 3, 4, 4], &mut r);
    let (_, sw) = maxpool_forward(&pre).unwrap();
    let g = ModelGraph::new(vec![3, 2, 2], vec![LayerSpec::Unpool2x2 { slot: 0 }]).unwrap();
    assert!(fd_check(&g, &[&sw], 2, 29) < 1e-5);

    // The gradient lands on exactly the switch positions.
    let x = random_tensor(&[2, 3, 2, 2], &mut r);
    let trace = forward_with(&g, &[], &x, &[&sw]).unwrap();
    let dy = random_tensor(&[2, 3, 4, 4], &mut r);
    let mut inj = vec![None];
    let grads = backward_with(&g, &[], &trace, Some(dy.clone()), &mut inj, &[&sw], true).unwrap();
    let want: Vec<f64> = sw.positions().iter().map(|&p| dy.data()[p]).collect();
    assert_eq!(grads.input.unwrap().data(), &want[..]);
}

#[test]
fn fd_flatten_unflatten_chain() {
    let g = ModelGraph::new(
        vec![2, 2, 3],
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 12, outputs: 8 },
            LayerSpec::Unflatten { shape: vec![2, 2, 2] },
            LayerSpec::Conv2d(ConvSpec::same(2, 1, 1)),
        ],
    )
    .unwrap();
    assert!(fd_check(&g, &[], 2, 30) < 1e-5);
}

#[test]
fn fd_small_cnn_stack() {
    let g = ModelGraph::new(
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d(ConvSpec::same(1, 2, 3)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 18, outputs: 3 },
        ],
    )
    .unwrap();
    assert!(fd_check(&g, &[], 2, 31) < 1e-5);
}

#[test]
fn injected_gradient_adds_to_chain() {
    // loss = <c, y2> + <d, y1> with y1 = relu(x), y2 = W y1.
    let g = ModelGraph::new(
        vec![3],
        vec![LayerSpec::Relu, LayerSpec::Dense { inputs: 3, outputs: 2 }],
    )
    .unwrap();
    let mut r = rng(40);
    let p = g.init_params(&mut r);
    let x = random_tensor(&[2, 3], &mut r);
    let c = random_tensor(&[2, 2], &mut r);
    let d = random_tensor(&[2, 3], &mut r);
    let trace = forward(&g, &p, &x).unwrap();
    let mut inj = vec![Some(d.clone()), None];
    let grads = backward_with(&g, p.tensors(), &trace, Some(c.clone()), &mut inj, &[], true).unwrap();
    let dx = grads.input.unwrap();
    for k in 0..x.len() {
        let num = central_difference(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[k] = v;
                let t = forward(&g, &p, &xp).unwrap();
                dot(&c, t.output()) + dot(&d, &t.outputs[0])
            },
            x.data()[k],
            FD_STEP,
        );
        assert!(crate::gradcheck::relative_error(dx.data()[k], num) < 1e-6);
    }
}
