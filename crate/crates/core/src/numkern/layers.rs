//! Linear and 1-D convolution layers with hand-written backward passes.
//!
//! Both kinds share [`Dense`]: a weight viewed as `[out x in_eff]` applied to a
//! row-major input `[T x in_eff]`. For a linear layer `in_eff = in`; for a
//! convolution the input is unfolded into `[T x in*k]` columns first, so the
//! `[out x in x k]` kernel is exactly its flattened `[out x in*k]` view.

use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::numkern::ops::{gemm_nt, transpose_raw};
use crate::numkern::{Param, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Linear,
    Conv1d,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Linear => 0,
            LayerKind::Conv1d => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Linear),
            1 => Some(LayerKind::Conv1d),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv1d => "conv1d",
        }
    }
}

/// Weight, bias, and optional low-rank adapter shared by both layer kinds.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub(crate) lora: Option<LoraPair>,
    d_in: usize,
    d_out: usize,
}

impl Dense {
    pub(crate) fn new(weight: Param, bias: Param) -> Self {
        let d_out = weight.value.shape()[0];
        let d_in = weight.value.len() / d_out;
        assert_eq!(bias.value.len(), d_out);
        Self {
            weight,
            bias,
            lora: None,
            d_in,
            d_out,
        }
    }

    /// Input width after unfolding (`in` or `in * k`).
    pub fn d_in_eff(&self) -> usize {
        self.d_in
    }

    pub fn d_out_eff(&self) -> usize {
        self.d_out
    }

    pub fn lora(&self) -> Option<&LoraPair> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraPair> {
        self.lora.as_mut()
    }

    pub fn is_adapted(&self) -> bool {
        self.lora.is_some()
    }

    /// Number of scalar weights and biases.
    pub fn base_param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.d_in {
            return Err(Error::shape(format!(
                "layer expects [T x {}], got {:?}",
                self.d_in,
                x.shape()
            )));
        }
        Ok(())
    }

    fn base_forward(&self, x: &Tensor) -> Vec<f32> {
        let t = x.rows();
        let mut y = gemm_nt(x.data(), self.weight.value.data(), t, self.d_out, self.d_in);
        let b = self.bias.value.data();
        for row in y.chunks_mut(self.d_out) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        y
    }

    pub(crate) fn forward_eff(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let t = x.rows();
        let mut y = self.base_forward(x);
        if let Some(pair) = self.lora.as_ref().filter(|p| p.is_active()) {
            let r = pair.rank();
            let u = gemm_nt(x.data(), pair.a.value.data(), t, r, self.d_in);
            let delta = gemm_nt(&u, pair.b.value.data(), t, self.d_out, r);
            let s = pair.scale();
            for (v, d) in y.iter_mut().zip(&delta) {
                *v += s * d;
            }
        }
        Tensor::new(&[t, self.d_out], y)
    }

    /// Accumulates parameter gradients for `dy` and returns the input
    /// gradient when `need_dx` is set.
    pub(crate) fn backward_eff(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let t = x.rows();
        if dy.rows() != t || dy.cols() != self.d_out {
            return Err(Error::shape(format!(
                "grad {:?} does not match output [{t} x {}]",
                dy.shape(),
                self.d_out
            )));
        }
        let dyt = transpose_raw(dy.data(), t, self.d_out);
        if self.weight.trainable {
            let xt = transpose_raw(x.data(), t, self.d_in);
            let dw = gemm_nt(&dyt, &xt, self.d_out, self.d_in, t);
            self.weight.accumulate(&dw);
        }
        if self.bias.trainable {
            let db: Vec<f32> = dyt
                .chunks(t)
                .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                .collect();
            self.bias.accumulate(&db);
        }
        let mut dx = if need_dx {
            let wt = transpose_raw(self.weight.value.data(), self.d_out, self.d_in);
            Some(gemm_nt(dy.data(), &wt, t, self.d_in, self.d_out))
        } else {
            None
        };
        if let Some(pair) = self.lora.as_mut().filter(|p| p.is_active()) {
            let r = pair.rank();
            let s = pair.scale();
            let u = gemm_nt(x.data(), pair.a.value.data(), t, r, self.d_in);
            // dB = s * dy^T u
            let ut = transpose_raw(&u, t, r);
            let mut db = gemm_nt(&dyt, &ut, self.d_out, r, t);
            db.iter_mut().for_each(|v| *v *= s);
            pair.b.accumulate(&db);
            // du = s * dy B
            let bt = transpose_raw(pair.b.value.data(), self.d_out, r);
            let mut du = gemm_nt(dy.data(), &bt, t, r, self.d_out);
            du.iter_mut().for_each(|v| *v *= s);
            // dA = du^T x
            let dut = transpose_raw(&du, t, r);
            let xt = transpose_raw(x.data(), t, self.d_in);
            let da = gemm_nt(&dut, &xt, r, self.d_in, t);
            pair.a.accumulate(&da);
            if let Some(dx) = dx.as_mut() {
                let at = transpose_raw(pair.a.value.data(), r, self.d_in);
                let dxl = gemm_nt(&du, &at, t, self.d_in, r);
                for (v, d) in dx.iter_mut().zip(&dxl) {
                    *v += d;
                }
            }
        }
        dx.map(|d| Tensor::new(&[t, self.d_in], d)).transpose()
    }

    /// Whether a backward pass would update anything on this layer.
    pub fn has_trainable(&self) -> bool {
        self.weight.trainable
            || self.bias.trainable
            || self.lora.as_ref().is_some_and(|p| p.is_active())
    }

    pub(crate) fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
        if let Some(pair) = self.lora.as_mut() {
            pair.a.zero_grad();
            pair.b.zero_grad();
        }
    }
}

fn init_dense(shape: &[usize], rng: &mut RngState, std: f64) -> Dense {
    let n = shape.iter().product();
    let w = Tensor::new(shape, rng.normal_vec(n, std)).expect("positive shape");
    Dense::new(Param::new(w), Param::new(Tensor::zeros(&[shape[0]])))
}

/// `h = x W^T + b`, rows are time steps.
pub fn linear_forward(x: &Tensor, w: &Param, b: &Param) -> Result<Tensor> {
    if w.value.shape().len() != 2 || b.value.shape() != [w.value.shape()[0]] {
        return Err(Error::shape(format!(
            "linear weight {:?} / bias {:?}",
            w.value.shape(),
            b.value.shape()
        )));
    }
    Dense::new(w.clone(), b.clone()).forward_eff(x)
}

/// Same-length cross-correlation over time with `(k-1)/2` zero frames of
/// padding on each side.
pub fn conv1d_forward(x: &Tensor, kernel: &Param, b: &Param) -> Result<Tensor> {
    let shape = kernel.value.shape();
    if shape.len() != 3 || b.value.shape() != [shape[0]] {
        return Err(Error::shape(format!(
            "conv kernel {shape:?} / bias {:?}",
            b.value.shape()
        )));
    }
    let (in_ch, k) = (shape[1], shape[2]);
    if k % 2 == 0 {
        return Err(Error::config(format!("conv kernel size {k} must be odd")));
    }
    if x.shape().len() != 2 || x.cols() != in_ch {
        return Err(Error::shape(format!(
            "conv expects [T x {in_ch}], got {:?}",
            x.shape()
        )));
    }
    Dense::new(kernel.clone(), b.clone()).forward_eff(&im2col(x, k))
}

/// Unfolds `[T x C]` into `[T x C*k]` with `col[t][c*k + j] = x[t + j - pad][c]`.
fn im2col(x: &Tensor, k: usize) -> Tensor {
    let (t_len, c_in) = (x.rows(), x.cols());
    let pad = (k - 1) / 2;
    let mut col = vec![0.0f32; t_len * c_in * k];
    for t in 0..t_len {
        let out = &mut col[t * c_in * k..(t + 1) * c_in * k];
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= t_len {
                continue;
            }
            let xr = x.row(src - pad);
            for c in 0..c_in {
                out[c * k + j] = xr[c];
            }
        }
    }
    Tensor::new(&[t_len, c_in * k], col).expect("non-empty input")
}

fn col2im(dcol: &Tensor, c_in: usize, k: usize) -> Tensor {
    let t_len = dcol.rows();
    let pad = (k - 1) / 2;
    let mut dx = Tensor::zeros(&[t_len, c_in]);
    for t in 0..t_len {
        let g = dcol.row(t);
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= t_len {
                continue;
            }
            let row = dx.row_mut(src - pad);
            for c in 0..c_in {
                row[c] += g[c * k + j];
            }
        }
    }
    dx
}

/// Fully connected layer, weight `[out x in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub dense: Dense,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngState, std: f64) -> Self {
        Self {
            dense: init_dense(&[d_out, d_in], rng, std),
            cache: None,
        }
    }

    pub fn from_params(weight: Param, bias: Param) -> Result<Self> {
        if weight.value.shape().len() != 2 || bias.value.shape() != [weight.value.shape()[0]] {
            return Err(Error::shape(format!(
                "linear weight {:?} / bias {:?}",
                weight.value.shape(),
                bias.value.shape()
            )));
        }
        Ok(Self {
            dense: Dense::new(weight, bias),
            cache: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.dense.d_in
    }

    pub fn d_out(&self) -> usize {
        self.dense.d_out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.dense.forward_eff(x)
    }

    /// Forward pass that records its input for [`Linear::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.dense.forward_eff(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        Ok(self.backward_opt(dy, true)?.expect("dx requested"))
    }

    /// Accumulates parameter gradients; returns the input gradient only when
    /// `need_dx` is set.
    pub fn backward_opt(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::state("linear backward without a recorded forward"))?;
        self.dense.backward_eff(&x, dy, need_dx)
    }
}

/// 1-D convolution over time, kernel `[out x in x k]`, same-length padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub dense: Dense,
    in_ch: usize,
    k: usize,
    cache: Option<Tensor>,
}

impl Conv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        rng: &mut RngState,
        std: f64,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::config(format!("conv kernel size {k} must be odd")));
        }
        Ok(Self {
            dense: init_dense(&[out_ch, in_ch, k], rng, std),
            in_ch,
            k,
            cache: None,
        })
    }

    pub fn from_params(kernel: Param, bias: Param) -> Result<Self> {
        let shape = kernel.value.shape().to_vec();
        if shape.len() != 3 || bias.value.shape() != [shape[0]] {
            return Err(Error::shape(format!(
                "conv kernel {shape:?} / bias {:?}",
                bias.value.shape()
            )));
        }
        if shape[2] % 2 == 0 {
            return Err(Error::config(format!(
                "conv kernel size {} must be odd",
                shape[2]
            )));
        }
        Ok(Self {
            dense: Dense::new(kernel, bias),
            in_ch: shape[1],
            k: shape[2],
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.dense.d_out
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.in_ch {
            return Err(Error::shape(format!(
                "conv expects [T x {}], got {:?}",
                self.in_ch,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        self.dense.forward_eff(&im2col(x, self.k))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let col = im2col(x, self.k);
        let y = self.dense.forward_eff(&col)?;
        self.cache = Some(col);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        Ok(self.backward_opt(dy, true)?.expect("dx requested"))
    }

    pub fn backward_opt(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let col = self
            .cache
            .take()
            .ok_or_else(|| Error::state("conv1d backward without a recorded forward"))?;
        let dcol = self.dense.backward_eff(&col, dy, need_dx)?;
        Ok(dcol.map(|d| col2im(&d, self.in_ch, self.k)))
    }
}
