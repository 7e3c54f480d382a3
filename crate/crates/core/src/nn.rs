//! Named parameter storage and the handful of layers the network needs.
//!
//! Every parameter lives in a [`ParamStore`] under a dotted name whose first
//! segment is its branch group (`transformer.`, `cnn.`, `stem.`, `prompt.`,
//! `decoder.`). Layers only hold names; tensors are fetched at forward time so
//! that frozen parameters can be handed out detached from the autograd graph.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    grad_enabled: Cell<bool>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            grad_enabled: Cell::new(true),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<String> {
        if self.vars.contains_key(name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(name.to_string())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<String> {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<String> {
        let n = shape.iter().product();
        self.insert(name, vec![1.0; n], shape)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f32, rng: &mut R) -> Result<String> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::config(name, e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, data, shape)
    }

    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f32, rng: &mut R) -> Result<String> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    /// Parameter tensor for a forward pass. Frozen parameters, and all
    /// parameters while gradients are disabled, come back detached.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?;
        if !self.grad_enabled.get() || self.frozen.contains(name) {
            Ok(v.as_tensor().detach())
        } else {
            Ok(v.as_tensor().clone())
        }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn set_frozen(&mut self, frozen: BTreeSet<String>) {
        self.frozen = frozen;
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_grad_enabled(&self, on: bool) {
        self.grad_enabled.set(on);
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    /// Element count over parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.count("")
    }

    /// Snapshot of all values as flat f32 vectors.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                Ok((
                    n.clone(),
                    v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
                ))
            })
            .collect()
    }

    /// Overwrite a parameter's values; the shape must match.
    pub fn assign(&self, name: &str, data: &[f32], shape: &[usize]) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?;
        if v.dims() != shape {
            return Err(Error::Shape(format!(
                "{name}: stored shape {:?}, incoming {shape:?}",
                v.dims()
            )));
        }
        let t = Tensor::from_slice(data, shape, &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}

/// Runs `f` with gradients disabled, restoring the previous state afterwards.
pub fn no_grad<T>(store: &ParamStore, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let prev = store.grad_enabled();
    store.set_grad_enabled(false);
    let out = f();
    store.set_grad_enabled(prev);
    out
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `true` when every element is finite.
pub fn all_finite(x: &Tensor) -> Result<bool> {
    let s = x.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Relu,
}

impl Act {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Gelu => x.gelu_erf()?,
            Act::Relu => x.relu()?,
        })
    }
}

/// Dense layer, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound, rng)?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[out_dim])?);
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn zero_init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = Some(store.zeros(&format!("{name}.bias"), &[out_dim])?);
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "{}: input dim {last}, expected {}",
                self.weight, self.in_dim
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, last))?.matmul(&store.get(&self.weight)?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&store.get(b)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.ones(&format!("{name}.weight"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&store.get(&self.weight)?)?
            .broadcast_add(&store.get(&self.bias)?)?)
    }

    /// Normalise over the channel axis of a `[B, C, H, W]` map.
    pub fn forward_nchw(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(store, &x.permute((0, 2, 3, 1))?)?;
        Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub padding: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f32).sqrt();
        Ok(Conv2d {
            weight: store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng)?,
            bias: store.zeros(&format!("{name}.bias"), &[out_ch])?,
            stride,
            padding,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(&self.weight)?;
        let y = if self.stride == 1 && 2 * self.padding + 1 == self.kernel {
            same_conv(x, &w, self.padding)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        let b = store.get(&self.bias)?.reshape((1, self.out_ch, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Stride-1 "same" convolution as shifted slices plus one matmul. Several
/// times faster than the backend's direct conv at the small channel counts
/// used here.
fn same_conv(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let mut cols = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            cols.push(xp.narrow(2, dy, h)?.narrow(3, dx, wd)?);
        }
    }
    // rows ordered (dy, dx, c), so the weight goes to [O, k, k, C]
    let cols = Tensor::cat(&cols, 1)?.reshape((b, k * k * c, h * wd))?;
    let wm = w.permute((0, 2, 3, 1))?.reshape((o, k * k * c))?;
    // a stride-0 batched lhs gives wrong products on the cpu backend
    Ok(wm.broadcast_left(b)?.contiguous()?.matmul(&cols)?.reshape((b, o, h, wd))?)
}

/// Transposed convolution with kernel = stride, no padding.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub out_ch: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((out_ch * stride * stride) as f32).sqrt();
        Ok(ConvTranspose2d {
            weight: store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, stride, stride], bound, rng)?,
            bias: store.zeros(&format!("{name}.bias"), &[out_ch])?,
            stride,
            out_ch,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&store.get(&self.weight)?, 0, 0, self.stride, 1)?;
        let b = store.get(&self.bias)?.reshape((1, self.out_ch, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Act,
}

impl Mlp {
    /// `dims` lists every layer width, input first.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], act: Act, rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, act })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(store, &h)?;
            if i + 1 < n {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head attention with an optional reduced internal width.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub internal: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, downsample: usize, rng: &mut R) -> Result<Self> {
        let internal = dim / downsample;
        if internal % heads != 0 {
            return Err(Error::config(name, format!("internal dim {internal} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, internal, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, internal, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, internal, rng)?,
            out: Linear::new(store, &format!("{name}.out"), internal, dim, rng)?,
            heads,
            internal,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.internal / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Softmax attention weights `[B, heads, Nq, Nk]`.
    pub fn weights(&self, store: &ParamStore, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let qh = self.split_heads(&self.q.forward(store, q)?)?;
        let kh = self.split_heads(&self.k.forward(store, k)?)?;
        let scale = 1.0 / ((self.internal / self.heads) as f64).sqrt();
        let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
        softmax_last(&scores)
    }

    pub fn forward(&self, store: &ParamStore, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, nq, _) = q.dims3()?;
        let w = self.weights(store, q, k)?;
        let vh = self.split_heads(&self.v.forward(store, v)?)?;
        let o = w.matmul(&vh)?.transpose(1, 2)?.reshape((b, nq, self.internal))?;
        self.out.forward(store, &o)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn frozen_params_are_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F32);
        let a = Linear::new(&mut store, "a", 3, 2, &mut rng).unwrap();
        let b = Linear::new(&mut store, "b", 2, 1, &mut rng).unwrap();
        store.set_frozen([a.weight.clone(), a.bias.clone().unwrap()].into_iter().collect());
        let x = Tensor::ones((4, 3), DType::F32, &Device::Cpu).unwrap();
        let y = b.forward(&store, &a.forward(&store, &x).unwrap()).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(store.var(&a.weight).unwrap()).is_none());
        assert!(grads.get(store.var(&b.weight).unwrap()).is_some());
    }

    #[test]
    fn same_conv_matches_backend_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new(DType::F64);
        let conv = Conv2d::new(&mut store, "c", 5, 3, 3, 1, 1, &mut rng).unwrap();
        let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let w = store.get(&conv.weight).unwrap();
        for shape in [(1, 5, 6, 6), (3, 5, 6, 6), (2, 5, 6, 7)] {
            let x = Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap();
            assert!(diff(&same_conv(&x, &w, 1).unwrap(), &x.conv2d(&w, 1, 1, 1, 1).unwrap()) < 1e-12, "{shape:?}");
        }
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 5, 6, 7), &Device::Cpu).unwrap()).unwrap();
        let w = store.var(&conv.weight).unwrap().clone();
        let b = store.get(&conv.bias).unwrap().reshape((1, 3, 1, 1)).unwrap();
        let ours = conv.forward(&store, x.as_tensor()).unwrap();
        let reference = x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap().broadcast_add(&b).unwrap();
        assert!(diff(&ours, &reference) < 1e-12, "{}", diff(&ours, &reference));
        // gradients through both input and weight agree as well
        let probe = Tensor::randn(0f64, 1.0, ours.shape(), &Device::Cpu).unwrap();
        let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [x.as_tensor(), w.as_tensor()] {
            assert!(diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
        let lin = Linear::new(&mut store, "lin", 5, 1, &mut rng).unwrap();
        let x0: Vec<f64> = (0..10).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let f = |x: &Tensor| -> Tensor {
            let y = lin.forward(&store, &ln.forward(&store, x).unwrap()).unwrap();
            y.sqr().unwrap().sum_all().unwrap()
        };
        let xv = Var::from_tensor(&Tensor::from_vec(x0.clone(), (2, 5), &Device::Cpu).unwrap()).unwrap();
        let g = f(xv.as_tensor()).backward().unwrap();
        let g = g.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += h;
            let mut m = x0.clone();
            m[i] -= h;
            let fp = f(&Tensor::from_vec(p, (2, 5), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, (2, 5), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(DType::F32);
        let attn = Attention::new(&mut store, "attn", 8, 2, 1, &mut rng).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let w = attn.weights(&store, &x, &x).unwrap();
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }
}
