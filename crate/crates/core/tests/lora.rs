use loralab::lora::{pair_param_count, INIT_STD};
use loralab::numkern::ops::mse_backward;
use loralab::numkern::{Conv1d, Dense, Linear, RngState, Tensor};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum AnyLayer {
    Linear(Linear),
    Conv(Conv1d),
}

impl AnyLayer {
    fn build(conv: bool, d_in: usize, d_out: usize, k: usize, seed: u64) -> Self {
        let mut rng = RngState::new(seed);
        if conv {
            AnyLayer::Conv(Conv1d::new(d_in, d_out, k, &mut rng, 0.3).unwrap())
        } else {
            AnyLayer::Linear(Linear::new(d_in, d_out, &mut rng, 0.3))
        }
    }

    fn dense(&self) -> &Dense {
        match self {
            AnyLayer::Linear(l) => &l.dense,
            AnyLayer::Conv(c) => &c.dense,
        }
    }

    fn dense_mut(&mut self) -> &mut Dense {
        match self {
            AnyLayer::Linear(l) => &mut l.dense,
            AnyLayer::Conv(c) => &mut c.dense,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            AnyLayer::Linear(l) => l.forward(x).unwrap(),
            AnyLayer::Conv(c) => c.forward(x).unwrap(),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        match self {
            AnyLayer::Linear(l) => l.forward_train(x).unwrap(),
            AnyLayer::Conv(c) => c.forward_train(x).unwrap(),
        }
    }

    fn backward(&mut self, dy: &Tensor) {
        match self {
            AnyLayer::Linear(l) => l.backward(dy).unwrap(),
            AnyLayer::Conv(c) => c.backward(dy).unwrap(),
        };
    }

    fn in_channels(&self) -> usize {
        match self {
            AnyLayer::Linear(l) => l.d_in(),
            AnyLayer::Conv(c) => c.in_channels(),
        }
    }
}

fn uniform(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

fn layer_strategy() -> impl Strategy<Value = (AnyLayer, Tensor, u64)> {
    (any::<bool>(), 1usize..20, 1usize..20, prop::sample::select(vec![1usize, 3, 5]), 1usize..10, any::<u64>()).prop_map(
        |(conv, d_in, d_out, k, t, seed)| {
            let layer = AnyLayer::build(conv, d_in, d_out, k, seed);
            let mut rng = RngState::derive(seed, 1);
            let x = uniform(&mut rng, &[t, layer.in_channels()]);
            (layer, x, seed)
        },
    )
}

fn max_rank(layer: &AnyLayer) -> usize {
    let d = layer.dense();
    d.d_in_eff().min(d.d_out_eff())
}

fn randomize_b(layer: &mut AnyLayer, seed: u64) {
    let mut rng = RngState::derive(seed, 2);
    let b = &mut layer.dense_mut().lora_mut().unwrap().b.value;
    let shape = b.shape().to_vec();
    *b = uniform(&mut rng, &shape);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fresh_adapter_is_bitwise_identity((layer, x, seed) in layer_strategy(), rank_pick in 0usize..64) {
        let base = layer.forward(&x);
        for r in [1, 1 + rank_pick % max_rank(&layer), max_rank(&layer)] {
            let mut l = layer.clone();
            l.dense_mut().attach(r, r as f32, &mut RngState::new(seed)).unwrap();
            prop_assert!(l.forward(&x).bit_eq(&base));
        }
    }

    #[test]
    fn merge_matches_unmerged((layer, x, seed) in layer_strategy(), alpha in 0.5f32..8.0) {
        let mut l = layer.clone();
        let r = max_rank(&l).min(4);
        l.dense_mut().attach(r, alpha, &mut RngState::new(seed)).unwrap();
        randomize_b(&mut l, seed);
        let unmerged = l.forward(&x);
        let w_before = l.dense().weight.value.clone();
        l.dense_mut().merge().unwrap();
        let merged = l.forward(&x);
        prop_assert!(merged.max_abs_diff(&unmerged).unwrap() <= 1e-5);
        l.dense_mut().unmerge().unwrap();
        prop_assert!(l.dense().weight.value.bit_eq(&w_before));
        prop_assert!(l.forward(&x).bit_eq(&unmerged));
    }

    #[test]
    fn trained_then_detached_is_pristine((layer, x, seed) in layer_strategy()) {
        let base_out = layer.forward(&x);
        let w = layer.dense().weight.value.clone();
        let b = layer.dense().bias.value.clone();
        let mut l = layer.clone();
        let r = max_rank(&l).min(3);
        l.dense_mut().attach(r, r as f32, &mut RngState::new(seed)).unwrap();
        let target = uniform(&mut RngState::derive(seed, 3), base_out.shape());
        for _ in 0..100 {
            let y = l.forward_train(&x);
            let dy = mse_backward(&y, &target, 1.0).unwrap();
            l.backward(&dy);
            let d = l.dense_mut();
            prop_assert!(d.weight.grad.data().iter().all(|&g| g == 0.0));
            prop_assert!(d.bias.grad.data().iter().all(|&g| g == 0.0));
            let pair = d.lora_mut().unwrap();
            for p in [&mut pair.a, &mut pair.b] {
                let g = p.grad.clone();
                for (v, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *v -= 0.05 * g;
                }
                p.zero_grad();
            }
        }
        prop_assert!(l.dense().weight.value.bit_eq(&w));
        prop_assert!(l.dense().bias.value.bit_eq(&b));
        l.dense_mut().detach().unwrap();
        prop_assert!(l.forward(&x).bit_eq(&base_out));
    }

    #[test]
    fn trainable_count_closed_form((layer, _x, seed) in layer_strategy(), rank_pick in 0usize..64) {
        let mut l = layer;
        let r = 1 + rank_pick % max_rank(&l);
        let (din, dout) = (l.dense().d_in_eff(), l.dense().d_out_eff());
        l.dense_mut().attach(r, 1.0, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(l.dense().lora().unwrap().param_count(), r * (din + dout));
        prop_assert_eq!(pair_param_count(r, din, dout), r * (din + dout));
    }
}

#[test]
fn linear_32_rank_4_is_a_quarter() {
    let mut l = Linear::new(32, 32, &mut RngState::new(0), 0.1);
    l.dense.attach(4, 4.0, &mut RngState::new(1)).unwrap();
    assert_eq!(l.dense.lora().unwrap().param_count(), 256);
    assert_eq!(l.dense.base_param_count() - 32, 1024);
}

#[test]
fn a_is_gaussian_with_small_std() {
    let mut l = Linear::new(64, 64, &mut RngState::new(0), 0.1);
    l.dense.attach(16, 16.0, &mut RngState::new(5)).unwrap();
    let pair = l.dense.lora().unwrap();
    assert!(pair.b.value.data().iter().all(|&v| v == 0.0));
    let a = pair.a.value.data();
    let n = a.len() as f64;
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002, "{mean}");
    assert!((std - INIT_STD).abs() < 0.002, "{std}");
}

#[test]
fn merge_matches_on_hundred_layers() {
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let conv = seed % 2 == 1;
        let mut l = AnyLayer::build(conv, 3 + (seed % 7) as usize, 2 + (seed % 5) as usize, 3, seed);
        let mut rng = RngState::derive(seed, 9);
        let x = uniform(&mut rng, &[6, l.in_channels()]);
        l.dense_mut().attach(2, 2.0, &mut rng).unwrap();
        randomize_b(&mut l, seed);
        let unmerged = l.forward(&x);
        l.dense_mut().merge().unwrap();
        worst = worst.max(l.forward(&x).max_abs_diff(&unmerged).unwrap());
    }
    assert!(worst <= 1e-5, "{worst}");
}
