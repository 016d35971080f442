use std::cell::Cell;

use candle_core::{DType, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use crate::config::ScaleMode;
use crate::error::{contract, Result};

/// Forward-pass regime.
pub enum Mode<'a> {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics (updating running ones) and dropout.
    Train(&'a mut ChaCha8Rng),
    /// Batch statistics and running-stat updates, no dropout.
    Calibrate,
}

impl Mode<'_> {
    fn batch_stats(&self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

struct NoGradGuard(bool);

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.set(self.0);
    }
}

/// Runs `f` with layer parameters read detached, so forward passes inside
/// build no autograd graph and free activations as they go.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard(NO_GRAD.replace(true));
    f()
}

fn param(t: &Tensor) -> Tensor {
    if NO_GRAD.get() {
        t.detach()
    } else {
        t.clone()
    }
}

pub struct Conv {
    inner: Conv2d,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        he_fan_out: bool,
    ) -> Result<Self> {
        let dims = [out_c, in_c, kernel, kernel];
        let fan_in = in_c * kernel * kernel;
        let w = if he_fan_out {
            init.kaiming_fan_out(&dims, out_c * kernel * kernel)?
        } else {
            init.fan_in_uniform(&dims, fan_in)?
        };
        let w = store.param(format!("{name}.weight"), w)?;
        let b = if bias {
            let b = init.fan_in_uniform(&[out_c], fan_in)?;
            Some(store.param(format!("{name}.bias"), b)?.as_tensor().clone())
        } else {
            None
        };
        let cfg = Conv2dConfig { padding, stride, ..Default::default() };
        Ok(Self { inner: Conv2d::new(w.as_tensor().clone(), b, cfg) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if NO_GRAD.get() {
            let c = &self.inner;
            return Ok(Conv2d::new(param(c.weight()), c.bias().map(param), *c.config()).forward(x)?);
        }
        Ok(self.inner.forward(x)?)
    }
}

pub struct Dense {
    inner: Linear,
}

pub enum DenseInit {
    /// PyTorch default U(±1/sqrt(fan_in)) for weight and bias.
    Default,
    /// Xavier-normal weight, zero bias.
    Xavier,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: DenseInit,
    ) -> Result<Self> {
        let (w, b) = match scheme {
            DenseInit::Default => (
                init.fan_in_uniform(&[out_dim, in_dim], in_dim)?,
                init.fan_in_uniform(&[out_dim], in_dim)?,
            ),
            DenseInit::Xavier => (
                init.xavier_normal(&[out_dim, in_dim], in_dim, out_dim)?,
                init.constant(&[out_dim], 0.0)?,
            ),
        };
        let w = store.param(format!("{name}.weight"), w)?;
        let b = store.param(format!("{name}.bias"), b)?;
        Ok(Self { inner: Linear::new(w.as_tensor().clone(), Some(b.as_tensor().clone())) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if NO_GRAD.get() {
            let l = &self.inner;
            return Ok(Linear::new(param(l.weight()), l.bias().map(param)).forward(x)?);
        }
        Ok(self.inner.forward(x)?)
    }
}

/// Batch normalisation over the channel axis of `(N, C)` or `(N, C, H, W)` input.
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

pub enum BnInit {
    /// weight = 1.
    Ones,
    /// weight ~ N(1, 0.02).
    Jitter,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, scheme: BnInit) -> Result<Self> {
        let w = match scheme {
            BnInit::Ones => init.constant(&[channels], 1.0)?,
            BnInit::Jitter => init.normal(&[channels], 1.0, 0.02)?,
        };
        Ok(Self {
            weight: store.param(format!("{name}.weight"), w)?,
            bias: store.param(format!("{name}.bias"), init.constant(&[channels], 0.0)?)?,
            running_mean: store.buffer(format!("{name}.running_mean"), init.constant(&[channels], 0.0)?)?,
            running_var: store.buffer(format!("{name}.running_var"), init.constant(&[channels], 1.0)?)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let rank = x.rank();
        let c = x.dim(1)?;
        let view: Vec<usize> = (0..rank).map(|i| if i == 1 { c } else { 1 }).collect();
        let reduce: Vec<usize> = (0..rank).filter(|&i| i != 1).collect();
        let (mean, var) = if mode.batch_stats() {
            let count = x.elem_count() / c;
            if count < 2 {
                return Err(contract(format!("batch statistics need more than one value per channel, got input {:?}", x.dims())));
            }
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            let unbiased = (var.detach().flatten_all()? * (count as f64 / (count - 1) as f64))?;
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                param(self.running_mean.as_tensor()).reshape(view.as_slice())?,
                param(self.running_var.as_tensor()).reshape(view.as_slice())?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = param(self.weight.as_tensor()).reshape(view.as_slice())?;
        let b = param(self.bias.as_tensor()).reshape(view.as_slice())?;
        Ok(xhat.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

/// Element-wise inverted dropout.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let Mode::Train(rng) = mode else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let mask = keep_mask(rng, x.elem_count(), p, x)?.reshape(x.dims())?;
    Ok((x * mask)?)
}

/// Channel-wise dropout for `(N, C, H, W)` maps.
pub fn dropout2d(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let Mode::Train(rng) = mode else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let (n, c, _, _) = x.dims4()?;
    let mask = keep_mask(rng, n * c, p, x)?.reshape((n, c, 1, 1))?;
    Ok(x.broadcast_mul(&mask)?)
}

fn keep_mask(rng: &mut ChaCha8Rng, n: usize, p: f64, like: &Tensor) -> Result<Tensor> {
    let mut init = Init { rng, device: like.device() };
    let scale = (1.0 / (1.0 - p)) as f32;
    let mask: Vec<f32> = init
        .bernoulli_keep(n, 1.0 - p)
        .into_iter()
        .map(|k| if k { scale } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(mask, n, like.device())?.to_dtype(like.dtype())?)
}

/// Linear classifier whose rows are `scale · v_k / ‖v_k‖`.
///
/// With [`ScaleMode::Shared`] every effective row has the same norm at all
/// times; [`ScaleMode::PerRow`] is the standard weight-norm layer.
pub struct WeightNormLinear {
    direction: Var,
    scale: Var,
    bias: Var,
    mode: ScaleMode,
}

impl WeightNormLinear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        mode: ScaleMode,
    ) -> Result<Self> {
        let v = init.xavier_normal(&[out_dim, in_dim], in_dim, out_dim)?;
        let norms = v.sqr()?.sum(1)?.sqrt()?;
        let g = match mode {
            ScaleMode::PerRow => norms,
            ScaleMode::Shared => norms.mean_keepdim(0)?,
        };
        Ok(Self {
            direction: store.param(format!("{name}.weight_v"), v)?,
            scale: store.param(format!("{name}.weight_g"), g)?,
            bias: store.param(format!("{name}.bias"), init.constant(&[out_dim], 0.0)?)?,
            mode,
        })
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    /// Effective `(K, d)` weight.
    pub fn weight(&self) -> Result<Tensor> {
        let v = param(self.direction.as_tensor());
        let norms = v.sqr()?.sum_keepdim(1)?.sqrt()?;
        let unit = v.broadcast_div(&norms)?;
        let g = param(self.scale.as_tensor()).unsqueeze(1)?;
        Ok(unit.broadcast_mul(&g)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight()?.to_dtype(x.dtype())?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&param(self.bias.as_tensor()).to_dtype(x.dtype())?)?)
    }

    /// Euclidean norm of each effective row.
    pub fn row_norms(&self) -> Result<Vec<f64>> {
        let w = self.weight()?.to_dtype(DType::F64)?;
        Ok(w.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f64>()?)
    }
}
