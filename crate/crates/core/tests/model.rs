use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalecorr::autograd::{grad_check_many, Graph};
use scalecorr::model::{build_pyramid, scaled_extent, Forward, Fusion, Mode, ModelConfig, ModelParams, SCALES_X4};
use scalecorr::nn::resize::ResizePlan;
use scalecorr::trainer::{nesterov_step, OptimState};
use scalecorr::Tensor;

fn config(filters: usize, scales: &[f64], fusion: Fusion) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        filters,
        scales: scales.to_vec(),
        fusion,
    }
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, h, w], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn pyramid_extents_use_ceiling() {
    let img = image(64, 64, 0);
    let p = build_pyramid(&img, &SCALES_X4).unwrap();
    let sizes: Vec<_> = p.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(sizes, vec![128, 64, 43, 32]);
    assert_eq!(scaled_extent(48, 1.5), 32);
    assert_eq!(scaled_extent(7, 2.0), 4);
}

#[test]
fn unit_scale_pyramid_is_the_image() {
    let img = image(9, 13, 1);
    assert_eq!(build_pyramid(&img, &[1.0]).unwrap()[0], img);
    let flat = Tensor::full([1, 2, 2], 0.7f32);
    let p = build_pyramid(&flat, &[2.0]).unwrap();
    assert_eq!(p[0].shape(), &[1, 1, 1]);
    assert!((p[0].data()[0] - 0.7).abs() < 1e-7);
}

fn zero_block_output(final_relu: bool) -> (Tensor<f32>, Tensor<f32>) {
    let m = ModelParams::<f32>::zeros(config(3, &[1.0], Fusion::Attention)).unwrap();
    let mut g = Graph::inference();
    let x = image(5, 6, 2).reshape([1, 5, 6]).unwrap();
    let x3 = Tensor::from_fn([3, 5, 6], |i| x.data()[i % 30] * (i / 30 + 1) as f32);
    let id = g.input(x3.clone());
    let mut fwd = Forward::bind(&m, &mut g, Mode::Infer);
    let block = m.feature_blocks[0];
    let out = fwd.residual_block(&mut g, id, &block, final_relu).unwrap();
    (x3, g.take_value(out))
}

#[test]
fn zero_branch_block_is_identity_or_relu() {
    let (x, y) = zero_block_output(false);
    assert!(x.max_abs_diff(&y) < 1e-5);
    let (x, y) = zero_block_output(true);
    assert!(x.map(|v| v.max(0.0)).max_abs_diff(&y) < 1e-5);
}

#[test]
fn residual_block_gradients_match_finite_differences() {
    let m = ModelParams::<f64>::init(config(3, &[1.0], Fusion::Attention), 4).unwrap();
    let block = m.feature_blocks[1];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn([3, 5, 5], |_| rng.random_range(-1.0..1.0));
    let probe = Tensor::from_fn([3, 5, 5], |_| rng.random_range(-1.0..1.0));
    let mut inputs = m.tensors.clone();
    inputs.push(x);
    inputs.push(probe);
    let n = m.tensors.len();
    let err = grad_check_many(
        |g, ids| {
            let mut fwd = Forward::with_leaves(&m, ids[..n].to_vec(), Mode::Train);
            let y = fwd.residual_block(g, ids[n], &block, true)?;
            let p = g.mul(y, ids[n + 1])?;
            g.sum(p)
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn single_scale_fusion_is_the_feature_net() {
    let m = ModelParams::<f32>::init(config(4, &[1.0], Fusion::Attention), 5).unwrap();
    let img = image(10, 11, 3);
    let a = m.features(&img, Mode::Infer).unwrap();
    let b = m.single_scale_features(&img, Mode::Infer).unwrap();
    assert_eq!(a, b);
    let att = m.attention(&img, Mode::Infer).unwrap();
    assert!(att.weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn zero_projection_gives_uniform_attention() {
    let mut m = ModelParams::<f32>::init(config(4, &SCALES_X4, Fusion::Attention), 6).unwrap();
    let p = m.projection;
    m.tensors[p.weight] = Tensor::zeros(m.tensors[p.weight].shape().to_vec());
    let att = m.attention(&image(12, 9, 4), Mode::Train).unwrap();
    assert!(att.weights.data().iter().all(|&w| (w - 0.25).abs() < 1e-7));
}

fn upsampled_scale_features(m: &ModelParams<f32>, img: &Tensor<f32>, scale: f64) -> Tensor<f32> {
    let (_, h, w) = img.chw().unwrap();
    let (sh, sw) = (scaled_extent(h, scale), scaled_extent(w, scale));
    let level = Tensor::new(
        [1, sh, sw],
        ResizePlan::new(h, w, sh, sw).unwrap().forward(img.data(), 1),
    )
    .unwrap();
    let f = m.single_scale_features(&level, Mode::Infer).unwrap();
    let d = f.shape()[0];
    Tensor::new([d, h, w], ResizePlan::new(sh, sw, h, w).unwrap().forward(f.data(), d)).unwrap()
}

#[test]
fn one_hot_attention_selects_that_scale() {
    for k in 0..2 {
        let mut m = ModelParams::<f32>::init(config(4, &[1.0, 2.0], Fusion::Attention), 7).unwrap();
        let p = m.projection;
        m.tensors[p.weight] = Tensor::zeros(m.tensors[p.weight].shape().to_vec());
        m.tensors[p.bias] = Tensor::from_fn([2], |s| if s == k { 200.0 } else { -200.0 });
        let img = image(14, 10, 8);
        let fused = m.features(&img, Mode::Infer).unwrap();
        let expected = upsampled_scale_features(&m, &img, [1.0, 2.0][k]);
        assert!(fused.max_abs_diff(&expected) < 1e-6, "scale {k}");
    }
}

#[test]
fn fusion_matches_componentwise_weighted_sum() {
    let m = ModelParams::<f32>::init(config(5, &[1.0, 2.0], Fusion::Attention), 8).unwrap();
    let img = image(13, 16, 9);
    let fused = m.features(&img, Mode::Infer).unwrap();
    let att = m.attention(&img, Mode::Infer).unwrap();
    let f1 = upsampled_scale_features(&m, &img, 1.0);
    let f2 = upsampled_scale_features(&m, &img, 2.0);
    let n = 13 * 16;
    for c in 0..5 {
        for p in 0..n {
            let a = att.weights.data();
            let want = a[p] as f64 * f1.data()[c * n + p] as f64 + a[n + p] as f64 * f2.data()[c * n + p] as f64;
            assert!((fused.data()[c * n + p] as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn concat_fusion_stacks_scales() {
    let m = ModelParams::<f32>::init(config(3, &[1.0, 2.0], Fusion::Concat), 10).unwrap();
    let img = image(8, 8, 11);
    let f = m.features(&img, Mode::Infer).unwrap();
    assert_eq!(f.shape(), &[6, 8, 8]);
    let f2 = upsampled_scale_features(&m, &img, 2.0);
    assert!(
        Tensor::new([3, 8, 8], f.data()[192..].to_vec())
            .unwrap()
            .max_abs_diff(&f2)
            < 1e-6
    );
}

#[test]
fn feature_net_is_pure() {
    let m = ModelParams::<f32>::init(config(4, &[1.0, 2.0], Fusion::Attention), 12).unwrap();
    let img = image(10, 10, 13);
    assert_eq!(
        m.features(&img, Mode::Infer).unwrap(),
        m.features(&img, Mode::Infer).unwrap()
    );
}

#[test]
fn perturbing_shared_weights_changes_every_scale() {
    let m = ModelParams::<f32>::init(config(4, &[1.0, 2.0], Fusion::Attention), 14).unwrap();
    let img = image(12, 12, 15);
    let before: Vec<_> = [1.0, 2.0]
        .iter()
        .map(|&s| upsampled_scale_features(&m, &img, s))
        .collect();
    let mut probe = m.clone();
    let w = probe.feature_blocks[2].conv1.weight;
    probe.tensors[w].data_mut()[0] += 0.5;
    for (k, &s) in [1.0, 2.0].iter().enumerate() {
        let after = upsampled_scale_features(&probe, &img, s);
        assert!(after.max_abs_diff(&before[k]) > 1e-6, "scale {s}");
    }
    // the same storage drives the attention trunk
    let a0 = m.attention(&img, Mode::Infer).unwrap();
    let a1 = probe.attention(&img, Mode::Infer).unwrap();
    assert!(a0.weights.max_abs_diff(&a1.weights) > 0.0);
}

#[test]
fn shared_blocks_alias_the_feature_blocks() {
    let m = ModelParams::<f32>::init(config(4, &[1.0, 2.0], Fusion::Attention), 16).unwrap();
    assert_eq!(m.attention_shared, m.feature_blocks);
    let mut m = m;
    let grads: Vec<_> = m.tensors.iter().map(|t| t.map(|_| 0.01)).collect();
    let mut o = OptimState::new(&m.tensors, 0.1, 0.9);
    nesterov_step(&mut m.tensors, &grads, &mut o, 0.1).unwrap();
    for (a, f) in m.attention_shared.iter().zip(&m.feature_blocks) {
        assert_eq!(m.tensors[a.conv1.weight], m.tensors[f.conv1.weight]);
        assert_eq!(m.tensors[a.bn2.gamma], m.tensors[f.bn2.gamma]);
    }
}

#[test]
fn attention_stays_on_simplex_for_extreme_images() {
    let m = ModelParams::<f32>::init(config(4, &SCALES_X4, Fusion::Attention), 17).unwrap();
    for img in [
        Tensor::full([1, 9, 9], 0.0f32),
        Tensor::full([1, 9, 9], 1e4),
        Tensor::from_fn([1, 9, 9], |i| if i % 2 == 0 { -1e3 } else { 1e3 }),
    ] {
        for mode in [Mode::Infer, Mode::Train] {
            let att = m.attention(&img, mode).unwrap();
            let n = 81;
            for p in 0..n {
                let s: f64 = (0..4).map(|k| att.weights.data()[k * n + p] as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    let m = ModelParams::<f32>::init(config(4, &[1.0, 2.0], Fusion::Attention), 18).unwrap();
    let mut g = Graph::new();
    let x = g.input(image(10, 10, 19));
    let mut fwd = Forward::bind(&m, &mut g, Mode::Train);
    let f = fwd.multiscale_features(&mut g, x).unwrap();
    let leaves = fwd.leaves().to_vec();
    let w = g.input(Tensor::from_fn([4, 10, 10], |i| ((i * 7919) % 13) as f32 - 6.0));
    let p = g.mul(f, w).unwrap();
    let root = g.sum(p).unwrap();
    g.backward(root).unwrap();
    for (name, id) in m.names.iter().zip(&leaves) {
        // a bias feeding train-mode batchnorm is cancelled by the mean
        if name.contains(".conv") && name.ends_with(".bias") {
            continue;
        }
        let gr = g.grad(*id);
        assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}
