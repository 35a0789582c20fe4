//! Small differentiable building blocks on top of candle tensors.
//!
//! Everything here is composed from primitive tensor ops so that autograd
//! covers it in both `f32` and `f64`.

use candle_core::{DType, Tensor, Var, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out, inp], Init::TruncNormal(0.02))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / inp;
        let y = x.reshape((rows, inp))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis. The max is detached since softmax is shift
/// invariant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-stochastic `[out, inp]` matrix of 1-D linear interpolation with
/// half-pixel centers (the `align_corners = false` convention).
pub fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

fn interp_tensor(out: usize, inp: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_matrix(out, inp), (out, inp), like.device())?.to_dtype(like.dtype())?)
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, h, w]`, expressed as two
/// matrix products so that it is differentiable.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, hi, wi) = x.dims4()?;
    if hi == h && wi == w {
        return Ok(x.clone());
    }
    let mut y = x.clone();
    if wi != w {
        let aw = interp_tensor(w, wi, x)?;
        y = y.reshape((b * c * hi, wi))?.matmul(&aw.t()?)?.reshape((b, c, hi, w))?;
    }
    if hi != h {
        let ah = interp_tensor(h, hi, x)?;
        // [h, hi] x [hi, w] per (b, c)
        let ah = ah.unsqueeze(0)?.broadcast_as((b * c, h, hi))?.contiguous()?;
        y = ah.matmul(&y.reshape((b * c, hi, w))?.contiguous()?)?.reshape((b, c, h, w))?;
    }
    Ok(y)
}

/// Linear resampling of axis 1 of `[B, T, ...]` to `t` entries.
pub fn resample_time(x: &Tensor, t: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (b, ti) = (dims[0], dims[1]);
    if ti == t {
        return Ok(x.clone());
    }
    let rest: usize = dims[2..].iter().product();
    let a = interp_tensor(t, ti, x)?.unsqueeze(0)?.broadcast_as((b, t, ti))?.contiguous()?;
    let y = a.matmul(&x.reshape((b, ti, rest))?.contiguous()?)?;
    let mut out = dims;
    out[1] = t;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (inp * kernel * kernel) as f64;
        let weight = store.param(
            &format!("{name}.weight"),
            &[out, inp, kernel, kernel],
            Init::Uniform((6.0 / fan_in).sqrt()),
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `[B, C, H, W]` → `[B, out, H, W]` (odd kernels keep spatial dims).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dims()[2];
        let y = if k == 1 {
            let (b, c, h, w) = x.dims4()?;
            let flat = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
            let w2 = self.weight.reshape((self.out_channels(), c))?;
            flat.matmul(&w2.t()?)?
                .reshape((b, h, w, self.out_channels()))?
                .permute((0, 3, 1, 2))?
                .contiguous()?
        } else {
            x.conv2d(&self.weight, self.padding, 1, 1, 1)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels(), 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch normalization over `[B, C, H, W]` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.param(&format!("{name}.weight"), &[channels], Init::Ones)?;
        let beta = store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?;
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        store.buffer(&mean_name, &[channels], Init::Zeros)?;
        store.buffer(&var_name, &[channels], Init::Ones)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: store.get(&mean_name).expect("just created").clone(),
            running_var: store.get(&var_name).expect("just created").clone(),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates only.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dims()[1];
        let (mean, var) = if train {
            let xt = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
            let n = xt.dims()[1];
            let mean = xt.mean_keepdim(1)?;
            let var = xt.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let unbiased = (var.detach() * (n as f64 / (n.max(2) - 1) as f64))?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.flatten_all()?, var.flatten_all()?)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let shape = (1, c, 1, 1);
        let normed = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var + self.eps)?.sqrt()?.reshape(shape)?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Tensor from `f64` values in the dtype of `like`.
pub fn tensor_like(values: Vec<f64>, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

/// All values of a tensor as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}
