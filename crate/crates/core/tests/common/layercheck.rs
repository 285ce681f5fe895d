//! Layer gradients against a finite-difference oracle evaluated on an
//! independent `f64` forward pass.

use loralab::lora::INIT_STD;
use loralab::numkern::ops::mse_backward;
use loralab::numkern::{finite_diff_grad, max_relative_error, Conv1d, Dense, Linear, Param, RngState, Tensor};

pub const EPS: f64 = 1e-2;
pub const REL_TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-3;

pub fn uniform(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

pub enum Which {
    Weight,
    Bias,
    A,
    B,
}

pub fn param_of<'a>(d: &'a mut Dense, which: &Which) -> &'a mut Param {
    match which {
        Which::Weight => &mut d.weight,
        Which::Bias => &mut d.bias,
        Which::A => &mut d.lora_mut().unwrap().a,
        Which::B => &mut d.lora_mut().unwrap().b,
    }
}

pub trait Layer: Clone {
    fn dense(&self) -> &Dense;
    fn dense_mut(&mut self) -> &mut Dense;
    /// Effective input rows (im2col columns for convolutions), in f64.
    fn x_eff(&self, x: &Tensor) -> Vec<Vec<f64>>;
    fn fwd_train(&mut self, x: &Tensor) -> Tensor;
    fn bwd(&mut self, dy: &Tensor) -> Tensor;
}

pub fn rows64(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|t| x.row(t).iter().map(|&v| v as f64).collect()).collect()
}

impl Layer for Linear {
    fn dense(&self) -> &Dense {
        &self.dense
    }
    fn dense_mut(&mut self) -> &mut Dense {
        &mut self.dense
    }
    fn x_eff(&self, x: &Tensor) -> Vec<Vec<f64>> {
        rows64(x)
    }
    fn fwd_train(&mut self, x: &Tensor) -> Tensor {
        self.forward_train(x).unwrap()
    }
    fn bwd(&mut self, dy: &Tensor) -> Tensor {
        self.backward(dy).unwrap()
    }
}

impl Layer for Conv1d {
    fn dense(&self) -> &Dense {
        &self.dense
    }
    fn dense_mut(&mut self) -> &mut Dense {
        &mut self.dense
    }
    fn x_eff(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let k = self.dense.d_in_eff() / x.cols();
        let pad = (k / 2) as isize;
        (0..x.rows() as isize)
            .map(|t| {
                let mut col = vec![0.0; x.cols() * k];
                for c in 0..x.cols() {
                    for j in 0..k {
                        let src = t + j as isize - pad;
                        if src >= 0 && (src as usize) < x.rows() {
                            col[c * k + j] = x.row(src as usize)[c] as f64;
                        }
                    }
                }
                col
            })
            .collect()
    }
    fn fwd_train(&mut self, x: &Tensor) -> Tensor {
        self.forward_train(x).unwrap()
    }
    fn bwd(&mut self, dy: &Tensor) -> Tensor {
        self.backward(dy).unwrap()
    }
}

pub fn mat64(t: &Tensor) -> Vec<Vec<f64>> {
    rows64(t)
}

/// Reference `mse(W x + b + s B A x, target)` entirely in f64.
pub fn reference_loss(d: &Dense, xe: &[Vec<f64>], target: &Tensor) -> f64 {
    let w = mat64(&d.weight.value);
    let b: Vec<f64> = d.bias.value.data().iter().map(|&v| v as f64).collect();
    let lora = d.lora().filter(|p| p.is_active()).map(|p| (mat64(&p.a.value), mat64(&p.b.value), p.scale() as f64));
    let mut total = 0.0;
    for (t, x) in xe.iter().enumerate() {
        let ax: Option<Vec<f64>> = lora
            .as_ref()
            .map(|(a, _, _)| a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect());
        for o in 0..w.len() {
            let mut y: f64 = w[o].iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b[o];
            if let (Some((_, bm, s)), Some(ax)) = (&lora, &ax) {
                y += s * bm[o].iter().zip(ax).map(|(p, q)| p * q).sum::<f64>();
            }
            total += (y - target.row(t)[o] as f64).powi(2);
        }
    }
    total / target.len() as f64
}

/// Checks the listed parameters of `layer` under an mse loss.
pub fn check_layer<L: Layer>(layer: &L, x: &Tensor, target: &Tensor, whiches: &[Which]) -> f64 {
    let xe = layer.x_eff(x);
    let mut worst = 0.0f64;
    for which in whiches {
        let mut l = layer.clone();
        param_of(l.dense_mut(), which).trainable = true;
        let y = l.fwd_train(x);
        let dy = mse_backward(&y, target, 1.0).unwrap();
        l.bwd(&dy);
        let p = param_of(l.dense_mut(), which).clone();
        let numeric = finite_diff_grad(&p, EPS, |v| {
            let mut probe = l.clone();
            param_of(probe.dense_mut(), which).value = v.clone();
            reference_loss(probe.dense(), &xe, target)
        })
        .unwrap();
        worst = worst.max(max_relative_error(&p.grad, &numeric, FLOOR).unwrap());
    }
    worst
}

pub fn randomize_b(d: &mut Dense, rng: &mut RngState) {
    let pair = d.lora_mut().unwrap();
    let n = pair.b.len();
    pair.b.value = Tensor::new(pair.b.value.shape(), rng.normal_vec(n, 0.5)).unwrap();
    // A starts at INIT_STD; widen so both factors matter.
    let n = pair.a.len();
    pair.a.value = Tensor::new(pair.a.value.shape(), rng.normal_vec(n, 10.0 * INIT_STD)).unwrap();
}

/// Worst relative error over `seeds` random linear layers, base and adapter
/// parameters.
pub fn linear_worst(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut rng = RngState::new(seed);
        let (d_in, d_out, t) = (5, 4, 3);
        let mut lin = Linear::new(d_in, d_out, &mut rng, 0.5);
        let x = uniform(&mut rng, &[t, d_in]);
        let target = uniform(&mut rng, &[t, d_out]);
        worst = worst.max(check_layer(&lin, &x, &target, &[Which::Weight, Which::Bias]));
        lin.dense.attach(2, 3.0, &mut rng).unwrap();
        randomize_b(&mut lin.dense, &mut rng);
        worst = worst.max(check_layer(&lin, &x, &target, &[Which::A, Which::B]));
    }
    worst
}

/// Same for convolutions.
pub fn conv_worst(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut rng = RngState::new(100 + seed);
        let (c_in, c_out, t) = (3, 2, 5);
        let mut conv = Conv1d::new(c_in, c_out, 3, &mut rng, 0.5).unwrap();
        let x = uniform(&mut rng, &[t, c_in]);
        let target = uniform(&mut rng, &[t, c_out]);
        worst = worst.max(check_layer(&conv, &x, &target, &[Which::Weight, Which::Bias]));
        conv.dense.attach(2, 2.0, &mut rng).unwrap();
        randomize_b(&mut conv.dense, &mut rng);
        worst = worst.max(check_layer(&conv, &x, &target, &[Which::A, Which::B]));
    }
    worst
}
