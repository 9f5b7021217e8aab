//! Channels-last tensor building blocks.
//!
//! Every image-like tensor in this crate is laid out `(batch, height, width, channels)`.
//! Convolutions lower to an explicit im2col followed by a single matmul, which keeps
//! both the forward and the backward pass on the gemm path.

use std::sync::{Arc, Mutex};

use candle_core::{
    bail, CpuStorage, CustomOp1, DType, Device, Layout, Result, Shape, Tensor, Var, D,
};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchGeometry {
    kernel: usize,
    stride: usize,
    pad: usize,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
}

impl PatchGeometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(src_offset, dst_offset)` for every in-bounds (pixel, kernel tap) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let cols = self.cols();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize)
                                * self.channels;
                            let dst = row + (ky * self.kernel + kx) * self.channels;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("patch ops require contiguous input"),
    }
}

fn im2col_slice<T: Copy + Default>(g: &PatchGeometry, src: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let mut dst = vec![T::default(); g.batch * oh * ow * g.cols()];
    let c = g.channels;
    g.for_each_tap(|s, d| dst[d..d + c].copy_from_slice(&src[s..s + c]));
    dst
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(g: &PatchGeometry, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::default(); g.batch * g.height * g.width * g.channels];
    let c = g.channels;
    g.for_each_tap(|s, d| {
        for (o, i) in dst[s..s + c].iter_mut().zip(&src[d..d + c]) {
            *o += *i;
        }
    });
    dst
}

struct Im2Col(PatchGeometry);
struct Col2Im(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((g.batch * oh * ow, g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_slice(g, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_slice(g, contiguous_slice(v, layout)?)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.height, g.width, g.channels));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_slice(g, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_slice(g, contiguous_slice(v, layout)?)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Extracts `kernel × kernel` patches from a `(B, H, W, C)` tensor into rows of
/// a `(B·OH·OW, kernel²·C)` matrix, tap-major then channel.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    if height + 2 * pad < kernel || width + 2 * pad < kernel {
        bail!("kernel {kernel} larger than padded input {height}x{width}");
    }
    let g = PatchGeometry {
        kernel,
        stride,
        pad,
        batch,
        height,
        width,
        channels,
    };
    x.contiguous()?.apply_op1(Im2Col(g))
}

/// Parameter initialisation rule.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Seeded parameter factory backed by a [`VarMap`].
///
/// Parameters are drawn from a ChaCha stream in creation order, so building the same
/// architecture with the same seed yields bit-identical weights.
#[derive(Clone)]
pub struct Params {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
    prefix: String,
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device: device.clone(),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: &str) -> Self {
        let mut next = self.clone();
        next.prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        next
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        Ok(self.get_var(shape, name, init)?.as_tensor().clone())
    }

    /// Like [`Params::get`] but returns the variable, for parameters that are also written outside the optimizer.
    pub fn get_var<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        let shape = shape.into();
        let n = shape.elem_count();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("param rng poisoned");
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => vec![v; n],
                Init::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut data = self.varmap.data().lock().expect("varmap poisoned");
        if data.contains_key(&full) {
            bail!("duplicate parameter name {full}");
        }
        data.insert(full, var.clone());
        Ok(var)
    }

    /// Every parameter of the underlying map, sorted by name.
    pub fn named_tensors(&self) -> std::collections::BTreeMap<String, Tensor> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter from `tensors`, which must hold each name with a matching shape.
    pub fn load_named(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        for (k, var) in data.iter() {
            let Some(t) = tensors.get(k) else {
                bail!("missing parameter {k}");
            };
            if t.dims() != var.dims() {
                bail!("parameter {k}: stored shape {:?}, expected {:?}", t.dims(), var.dims());
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.varmap.data().lock().expect("varmap poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Square convolution over channels-last input, weight stored as `(k²·C_in, C_out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        p: &Params,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * c_in;
        let weight = p.get((fan_in, c_out), "weight", Init::FanIn(fan_in))?;
        let bias = p.get(c_out, "bias", Init::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            pad,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(p: &Params, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(p, c_in, c_out, 3, 1, 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (rows, oh, ow) = if self.kernel == 1 && self.stride == 1 {
            (x.reshape((b * h * w, ()))?, h, w)
        } else {
            let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
            let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
            (im2col(x, self.kernel, self.stride, self.pad)?, oh, ow)
        };
        rows.matmul(&self.weight)?
            .broadcast_add(&self.bias)?
            .reshape((b, oh, ow, ()))
    }
}

/// Dense layer acting on the last dimension of any-rank input.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(p: &Params, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get((c_in, c_out), "weight", Init::FanIn(c_in))?,
            bias: p.get(c_out, "bias", Init::FanIn(c_in))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c_in = *dims.last().expect("dense input has rank >= 1");
        let rows = x.reshape(((), c_in))?;
        let y = rows.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().expect("nonempty") = self.weight.dim(1)?;
        y.reshape(out)
    }
}

/// Nearest-neighbour upsampling of a `(B, H, W, C)` tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, factor, w, factor, c))?
        .reshape((b, h * factor, w * factor, c))
}

/// Non-overlapping average pooling of a `(B, H, W, C)` tensor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, h, w, c) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        bail!("avg_pool factor {factor} does not divide {h}x{w}");
    }
    x.reshape((b, h / factor, factor, w / factor, factor, c))?
        .sum(4)?
        .sum(2)?
        .affine(1.0 / (factor * factor) as f64, 0.0)
}

/// Depth-to-space: `(B, H, W, C·r²)` → `(B, H·r, W·r, C)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w, crr) = x.dims4()?;
    if crr % (r * r) != 0 {
        bail!("pixel_shuffle: {crr} channels not divisible by {}", r * r);
    }
    let c = crr / (r * r);
    x.reshape((b, h, w, r, r, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * r, w * r, c))
}

/// Mean over every element except the batch dimension, then over the batch.
pub fn batch_sum_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    x.sum_all()?.affine(1.0 / b as f64, 0.0)
}

/// Log-sigmoid computed stably as `-softplus(-x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    // min(x, 0) - ln(1 + exp(-|x|))
    let neg_abs = x.abs()?.neg()?;
    let soft = neg_abs.exp()?.affine(1.0, 1.0)?.log()?;
    x.minimum(0.0)?.sub(&soft)
}

pub fn last_dim_softmax(x: &Tensor) -> Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}
