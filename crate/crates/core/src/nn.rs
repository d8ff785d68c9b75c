//! Small neural-network toolkit on top of `candle-core`: a named parameter
//! store with deterministic initialization, the handful of layers the
//! segmentation model needs, a per-sample dropout context, and Adam.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{channel_moments, BatchNorm, Conv};

/// Stable 64-bit FNV-1a hash, used to derive per-parameter RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
}

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics). Initial values depend only on the store seed and
/// the parameter name, never on construction order.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(_) | Init::Kaiming(_) => {
                let std = match init {
                    Init::Kaiming(fan_in) => (2.0 / fan_in.max(1) as f64).sqrt(),
                    Init::Normal(std) => std,
                    _ => unreachable!(),
                };
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(name.as_bytes())));
                let normal = Normal::new(0.0, std).map_err(|e| Error::validation(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// All parameters and buffers, keyed by hierarchical name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every stored tensor from `tensors`; all names must match.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.path(name),
            store: self.store,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.param_var(name, shape, init)?.as_tensor().clone())
    }

    /// Like [`Scope::param`] but returns the variable handle so the value
    /// can later be overwritten in place.
    pub fn param_var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        if self.store.params.contains_key(&path) {
            return Err(Error::validation(format!("duplicate parameter `{path}`")));
        }
        let var = Var::from_tensor(&self.store.init_tensor(&path, shape, init)?)?;
        self.store.params.insert(path, var.clone());
        Ok(var)
    }

    pub fn seed(&self) -> u64 {
        mix_seed(self.store.seed, fnv1a(self.prefix.as_bytes()))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        let var = Var::from_tensor(&self.store.init_tensor(&path, shape, init)?)?;
        self.store.buffers.insert(path, var.clone());
        Ok(var)
    }
}

/// Forward-pass mode: batch-norm statistics source and dropout sampling.
///
/// Dropout masks for batch element `b` are drawn from `rngs[b]` only, so a
/// sample's mask never depends on what else is in the batch.
pub struct Pass {
    pub train: bool,
    rngs: Option<Vec<ChaCha8Rng>>,
}

impl Pass {
    /// Batch-norm running statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            train: false,
            rngs: None,
        }
    }

    /// Batch statistics with dropout; one seed per batch element.
    pub fn train(seeds: &[u64]) -> Self {
        Self {
            train: true,
            rngs: Some(
                seeds
                    .iter()
                    .map(|s| ChaCha8Rng::seed_from_u64(*s))
                    .collect(),
            ),
        }
    }

    /// Batch statistics without dropout.
    pub fn batch_stats() -> Self {
        Self {
            train: true,
            rngs: None,
        }
    }

    /// Running statistics with dropout kept on (Monte Carlo sampling).
    pub fn monte_carlo(seeds: &[u64]) -> Self {
        Self {
            train: false,
            rngs: Some(
                seeds
                    .iter()
                    .map(|s| ChaCha8Rng::seed_from_u64(*s))
                    .collect(),
            ),
        }
    }

    pub fn dropout_active(&self) -> bool {
        self.rngs.is_some()
    }

    pub fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        let Some(rngs) = self.rngs.as_mut() else {
            return Ok(x.clone());
        };
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        let dims = x.dims().to_vec();
        let b = dims[0];
        if rngs.len() != b {
            return Err(Error::shape(format!(
                "dropout context holds {} streams for a batch of {b}",
                rngs.len()
            )));
        }
        let per: usize = dims[1..].iter().product();
        let keep = 1.0 - rate;
        let scale = (1.0 / keep) as f32;
        let mut mask = Vec::with_capacity(b * per);
        for rng in rngs.iter_mut() {
            mask.extend((0..per).map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            }));
        }
        let mask = Tensor::from_vec(mask, dims.as_slice(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// 2-D convolution with square kernel (1 or 3), "same" padding and optional
/// dilation. Weights are stored flattened as `(out, k*k*in)`, column index
/// `(ky * k + kx) * in + c`.
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::validation(format!(
                "unsupported kernel size {kernel}"
            )));
        }
        let fan_in = in_c * kernel * kernel;
        let weight = scope.param("w", &[out_c, fan_in], Init::Kaiming(fan_in))?;
        let bias = if bias {
            Some(scope.param("b", &[out_c], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            dilation: dilation.max(1),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_c {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let op = Conv {
            kernel: self.kernel,
            dilation: self.dilation,
        };
        let y = x.contiguous()?.apply_op2(&self.weight, op)?;
        match &self.bias {
            Some(bias) => Ok(y
                .reshape((b, self.out_c, h * w))?
                .broadcast_add(&bias.reshape((1, self.out_c, 1))?)?
                .reshape((b, self.out_c, h, w))?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics held as
/// store buffers.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Const(1.0))?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Const(1.0))?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let x = x.contiguous()?;
        let (mean, var) = if pass.train {
            let (mean, var) = channel_moments(&x)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let batch_mean = Tensor::new(mean.as_slice(), dev)?.to_dtype(x.dtype())?;
            let batch_var = Tensor::new(var.as_slice(), dev)?.to_dtype(x.dtype())?;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (batch_var * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            let read = |v: &Var| -> Result<Vec<f64>> {
                Ok(v.as_tensor().to_dtype(DType::F64)?.to_vec1()?)
            };
            (read(&self.running_mean)?, read(&self.running_var)?)
        };
        let op = BatchNorm {
            mean,
            var,
            eps: self.eps,
            batch: pass.train,
        };
        Ok(x.apply_op3(&self.gamma, &self.beta, op)?)
    }
}

/// Affine map on the last dimension; weight stored `(in, out)`.
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("w", &[in_dim, out_dim], Init::Kaiming(in_dim))?,
            bias: scope.param("b", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Bilinear interpolation weights (half-pixel centers, edge clamped) as a
/// dense `(out_len, in_len)` matrix.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = ry.broadcast_matmul(&flat)?.broadcast_matmul(&rx)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// 2x2 max pooling with stride 2 (H and W must be even).
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max_pool2 needs even size, got {h}x{w}"
        )));
    }
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Numerically stable softmax on the last dimension, built from primitive
/// ops so gradients flow through candle's autodiff.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Adam with L2-style weight decay folded into the gradient.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &candle_core::backprop::GradStore,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay > 0.0 {
                g = (g + (&w * self.weight_decay)?)?;
            }
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(w - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }

    /// Optimizer state as named tensors (for checkpoint resume).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{name}"), m.clone());
            out.insert(format!("adam.v.{name}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: usize, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.moments.clear();
        for (key, m) in tensors {
            if let Some(name) = key.strip_prefix("adam.m.") {
                if let Some(v) = tensors.get(&format!("adam.v.{name}")) {
                    self.moments
                        .insert(name.to_string(), (m.clone(), v.clone()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_state_keeps_no_graph() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.root().param("w", &[3], Init::Normal(1.0)).unwrap();
        let mut adam = Adam::new(1e-2, 1e-4);
        for _ in 0..3 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&store, &grads).unwrap();
        }
        assert_eq!(adam.steps_taken(), 3);
        for t in adam.state_tensors().values() {
            assert!(!t.track_op());
        }
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(3, DType::F64);
        let mut b = ParamStore::new(3, DType::F64);
        let x1 = a.root().param("x", &[4], Init::Normal(1.0)).unwrap();
        let _ = a.root().param("y", &[4], Init::Normal(1.0)).unwrap();
        let _ = b.root().param("y", &[4], Init::Normal(1.0)).unwrap();
        let x2 = b.root().param("x", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(x1.to_vec1::<f64>().unwrap(), x2.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(64, 4), (4, 64), (7, 3), (16, 16)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut store = ParamStore::new(1, DType::F64);
        let conv = Conv2d::new(&mut store.root().sub("c"), 2, 3, 3, 2, true).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 2, 6, 5), &dev).unwrap();
        let y = conv.forward(&x).unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let ws: Vec<f64> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
        let ys: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let (c, h, w, d) = (2usize, 6usize, 5usize, 2isize);
        for o in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let yy = i as isize + (ky - 1) * d;
                            let xx = j as isize + (kx - 1) * d;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let widx = o * 9 * c + ((ky * 3 + kx) as usize) * c + ci;
                                acc += ws[widx] * xs[ci * h * w + yy as usize * w + xx as usize];
                            }
                        }
                    }
                    let got = ys[o * h * w + i * w + j];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let y = max_pool2(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn dropout_is_per_sample_deterministic() {
        let x = Tensor::ones((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let mut p1 = Pass::train(&[5, 9]);
        let mut p2 = Pass::train(&[5]);
        let a = p1.dropout(&x, 0.5).unwrap();
        let b = p2.dropout(&x.narrow(0, 0, 1).unwrap(), 0.5).unwrap();
        let a0: Vec<f32> = a
            .narrow(0, 0, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b0: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a0, b0);
        assert!(a0.iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
