//! Seeded parameter storage, layers and an Adam optimizer with exportable state.
//!
//! candle's CPU RNG cannot be seeded, so every parameter is drawn here from a
//! ChaCha stream in construction order.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Array;
use crate::error::{input_err, FlabError, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("n_vars", &self.vars.len())
            .field("n_params", &self.n_params())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
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

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return input_err(format!("parameter `{name}` registered twice"));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[fan_out, fan_in], bound)?;
        let b = self.uniform(&format!("{name}.bias"), &[fan_out], bound)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn linear_zeroed(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let w = self.zeros(&format!("{name}.weight"), &[fan_out, fan_in])?;
        let b = self.zeros(&format!("{name}.bias"), &[fan_out])?;
        Ok(Linear::new(w, Some(b)))
    }

    /// `kernel x kernel` convolution with `kernel / 2` zero padding.
    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Conv> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = self.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Conv::new(weight, bias, stride)
    }

    /// Kernel-2, stride-2 transposed convolution: exactly doubles both spatial dims.
    pub fn up_conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<UpConv> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[c_in, c_out, 2, 2], bound)?;
        let bias = self.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(UpConv { weight, bias })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| FlabError::Input(format!("no parameter `{name}`")))
    }

    pub fn to_arrays(&self) -> Result<BTreeMap<String, Array>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), tensor_to_array(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `arrays`; names and shapes must match exactly.
    pub fn load_arrays(&self, arrays: &BTreeMap<String, Array>) -> Result<()> {
        for (name, var) in &self.vars {
            let Some(a) = arrays.get(name) else {
                return input_err(format!("checkpoint lacks parameter `{name}`"));
            };
            if a.shape != var.dims() {
                return input_err(format!(
                    "parameter `{name}`: checkpoint shape {:?} vs model {:?}",
                    a.shape,
                    var.dims()
                ));
            }
            let t = Tensor::from_vec(a.data.clone(), a.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array> {
    let shape = t.dims().to_vec();
    let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Array::new(shape, data)
}

pub fn array_to_tensor(a: &Array, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(a.data.clone(), a.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Patch geometry shared by [`Im2Col`] and its adjoint [`Col2Im`].
#[derive(Debug, Clone, Copy)]
struct Patches {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Patches {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    /// For one image, the input offset feeding each patch entry (`u32::MAX` for padding).
    fn table(&self) -> Vec<u32> {
        let (k, p) = (self.k, self.k / 2);
        let mut t = Vec::with_capacity(self.ho * self.wo * self.cols());
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                for c in 0..self.c {
                    for dy in 0..k {
                        let iy = (oy * self.stride + dy) as isize - p as isize;
                        for dx in 0..k {
                            let ix = (ox * self.stride + dx) as isize - p as isize;
                            let inside = iy >= 0 && iy < self.h as isize && ix >= 0 && ix < self.w as isize;
                            t.push(if inside {
                                ((c * self.h + iy as usize) * self.w + ix as usize) as u32
                            } else {
                                u32::MAX
                            });
                        }
                    }
                }
            }
        }
        t
    }

    fn gather<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let table = self.table();
        let image = self.c * self.h * self.w;
        let mut out = Vec::with_capacity(self.batch * table.len());
        for b in 0..self.batch {
            let src = &x[b * image..(b + 1) * image];
            out.extend(
                table
                    .iter()
                    .map(|&i| if i == u32::MAX { T::default() } else { src[i as usize] }),
            );
        }
        out
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let table = self.table();
        let image = self.c * self.h * self.w;
        let mut out = vec![T::default(); self.batch * image];
        for (b, dst) in out.chunks_exact_mut(image).enumerate() {
            let src = &cols[b * table.len()..(b + 1) * table.len()];
            for (&i, &v) in table.iter().zip(src) {
                if i != u32::MAX {
                    dst[i as usize] += v;
                }
            }
        }
        out
    }
}

fn contiguous<'a, T: candle_core::WithDType>(
    storage: &'a candle_core::CpuStorage,
    layout: &candle_core::Layout,
) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("patch ops need contiguous input".into()))?;
    Ok(&storage.as_slice::<T>()?[start..end])
}

/// `(B, C, H, W)` to `(B, Ho * Wo, C * k * k)` zero-padded patches.
struct Im2Col(Patches);

/// Adjoint of [`Im2Col`]: scatter-adds patches back onto the image.
struct Col2Im(Patches);

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let g = self.0;
        let out = match storage {
            S::F32(_) => S::F32(g.gather(contiguous::<f32>(storage, layout)?)),
            S::F64(_) => S::F64(g.gather(contiguous::<f64>(storage, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32/f64 only".into())),
        };
        Ok((out, (g.batch, g.ho * g.wo, g.cols()).into()))
    }

    fn bwd(&self, _: &Tensor, _: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let g = self.0;
        let out = match storage {
            S::F32(_) => S::F32(g.scatter(contiguous::<f32>(storage, layout)?)),
            S::F64(_) => S::F64(g.scatter(contiguous::<f64>(storage, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32/f64 only".into())),
        };
        Ok((out, (g.batch, g.c, g.h, g.w).into()))
    }

    fn bwd(&self, _: &Tensor, _: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Zero-padded convolution lowered to im2col plus one matmul.
///
/// candle's CPU convolution backward runs a direct transposed convolution that
/// dominated training time at these sizes.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv {
    /// `weight` is `(c_out, c_in, k, k)` with odd `k`; padding is `k / 2`.
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 || stride == 0 {
            return input_err(format!("unsupported convolution: kernel {kh}x{kw}, stride {stride}"));
        }
        Ok(Self {
            weight,
            bias,
            kernel: kh,
            stride,
        })
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (batch, c, h, w) = x.dims4()?;
        let (k, p, s) = (self.kernel, self.kernel / 2, self.stride);
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let g = Patches {
            batch,
            c,
            h,
            w,
            k,
            stride: s,
            ho,
            wo,
        };
        let cols = x
            .contiguous()?
            .apply_op1(Im2Col(g))?
            .reshape((batch * ho * wo, g.cols()))?;
        let c_out = self.weight.dim(0)?;
        let wmat = self.weight.reshape((c_out, g.cols()))?;
        let y = cols.matmul(&wmat.t()?)?.broadcast_add(&self.bias)?;
        y.reshape((batch, ho * wo, c_out))?
            .transpose(1, 2)?
            .reshape((batch, c_out, ho, wo))
    }
}

/// Kernel-2, stride-2 transposed convolution: each input pixel writes one 2x2 output block.
#[derive(Debug, Clone)]
pub struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl Module for UpConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.weight.dim(1)?;
        let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let y = rows.matmul(&self.weight.reshape((c, c_out * 4))?)?;
        let y = y
            .reshape((b, h, w, c_out, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, c_out, 2 * h, 2 * w))?;
        y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

pub fn apply(layer: &impl Module, x: &Tensor) -> Result<Tensor> {
    Ok(layer.forward(x)?)
}

/// Row-wise L2 normalization of a `(B, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Sinusoidal features of integer steps, `(B, dim)`.
pub fn sinusoidal_embedding(steps: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((s * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((s * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over a named set of variables. Moments and the step counter can be
/// exported so that a resumed run continues bit-identically.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = (String, &'a Var)>, config: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in vars {
            slots.insert(
                name,
                Slot {
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                },
            );
        }
        Ok(Self { config, step: 0, slots })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step_with(&grads)
    }

    pub fn step_with(&mut self, grads: &GradStore) -> Result<()> {
        let cfg = self.config;
        let scale = match cfg.clip_norm {
            Some(max) => {
                let mut sq = 0.0f64;
                for slot in self.slots.values() {
                    if let Some(g) = grads.get(slot.var.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if !norm.is_finite() {
                    return Err(FlabError::Numerical(format!("gradient norm is {norm}")));
                }
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            slot.m = ((&slot.m * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
            slot.v = ((&slot.v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let mhat = (&slot.m / bc1)?;
            let vhat = (&slot.v / bc2)?;
            let update = (mhat / (vhat.sqrt()? + cfg.eps)?)?;
            let next = (slot.var.as_tensor().detach() - (update * cfg.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn state_arrays(&self) -> Result<BTreeMap<String, Array>> {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("m.{name}"), tensor_to_array(&slot.m)?);
            out.insert(format!("v.{name}"), tensor_to_array(&slot.v)?);
        }
        out.insert("step".to_string(), Array::vector(vec![self.step as f32]));
        Ok(out)
    }

    pub fn load_state(&mut self, arrays: &BTreeMap<String, Array>) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let dtype = slot.m.dtype();
            slot.m = array_to_tensor(
                arrays
                    .get(&format!("m.{name}"))
                    .ok_or_else(|| FlabError::Input(format!("optimizer state lacks m.{name}")))?,
                dtype,
            )?;
            slot.v = array_to_tensor(
                arrays
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| FlabError::Input(format!("optimizer state lacks v.{name}")))?,
                dtype,
            )?;
        }
        self.step = arrays.get("step").map(|a| a.data[0] as u64).unwrap_or(0);
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
