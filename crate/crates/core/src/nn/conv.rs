//! 3-D convolution (cross-correlation) with zero padding and unit stride.
//!
//! Both passes work on the zero-padded volume in flat coordinates: each
//! output voxel is anchored at the padded-flat index of its receptive-field
//! corner, so every kernel tap is a constant shift. Copies of the input
//! shifted by `(kh, kw)` are materialized once; the `kd` shift is a plain
//! offset into that buffer, giving `k` GEMMs per sample. Anchors that fall
//! in the padding margin are computed and discarded.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::Rng;

use super::{Param, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c_in: usize,
    k: usize,
    pad: usize,
    input: [usize; 3],
    padded: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(c_in: usize, k: usize, pad: usize, input: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        let mut padded = [0; 3];
        for ((o, p), &i) in output.iter_mut().zip(&mut padded).zip(&input) {
            ensure!(
                i + 2 * pad >= k,
                Dimension,
                "kernel {k} with padding {pad} does not fit spatial extent {i}"
            );
            *p = i + 2 * pad;
            *o = *p + 1 - k;
        }
        Ok(Self {
            c_in,
            k,
            pad,
            input,
            padded,
            output,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.padded[1] * self.padded[2]
    }

    /// Flat offset in the padded volume of output voxel `(z, y, x)`, which
    /// is also the corner of its receptive field.
    fn anchor(&self, z: usize, y: usize) -> usize {
        z * self.plane() + y * self.padded[2]
    }

    /// Number of padded-flat positions spanned by the output anchors.
    fn span(&self) -> usize {
        let [od, oh, ow] = self.output;
        self.anchor(od - 1, oh - 1) + ow
    }

    /// Rows of the shifted buffer: one per `(c_in, kh, kw)`.
    fn shift_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn shift_len(&self) -> usize {
        self.span() + (self.k - 1) * self.plane()
    }

    /// Builds the `(c_in, kh, kw)`-shifted copies of the zero-padded input.
    /// Row `r` starting at column `kd·plane` lines up every output anchor
    /// with input tap `(kd, kh, kw)`, so one GEMM per `kd` covers the whole
    /// volume.
    fn shifted<T: Real>(&self, x: &[T]) -> Vec<T> {
        let [d, h, w] = self.input;
        let wp = self.padded[2];
        let plane = self.plane();
        let in_vox = self.in_voxels();
        let padded_len = self.padded[0] * plane;
        let len = self.shift_len();
        let mut xpad = vec![T::zero(); padded_len];
        let mut out = vec![T::zero(); self.shift_rows() * len];
        for c in 0..self.c_in {
            let src = &x[c * in_vox..(c + 1) * in_vox];
            for z in 0..d {
                for y in 0..h {
                    let dst = (z + self.pad) * plane + (y + self.pad) * wp + self.pad;
                    xpad[dst..dst + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
                }
            }
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    let off = kh * wp + kw;
                    out[row * len..(row + 1) * len].copy_from_slice(&xpad[off..off + len]);
                }
            }
        }
        out
    }

    /// Regroups `C_out×C_in×k×k×k` weights into one `C_out × (C_in·k·k)`
    /// matrix per `kd`.
    fn weight_slices<T: Real>(&self, weight: &[T], c_out: usize) -> Vec<Vec<T>> {
        let k = self.k;
        (0..k)
            .map(|kd| {
                let mut m = Vec::with_capacity(c_out * self.shift_rows());
                for co in 0..c_out {
                    for ci in 0..self.c_in {
                        let base = ((co * self.c_in + ci) * k + kd) * k * k;
                        m.extend_from_slice(&weight[base..base + k * k]);
                    }
                }
                m
            })
            .collect()
    }
}

static SIMD_ENABLED: AtomicBool = AtomicBool::new(true);

/// Allows or forbids the direct SIMD kernels (on by default). With them
/// off, `f32` convolutions take the GEMM path used for `f64`.
pub fn set_simd_kernels(enabled: bool) {
    SIMD_ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether `f32` convolutions currently run on the direct SIMD kernels.
pub fn simd_kernels_active() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        SIMD_ENABLED.load(Ordering::Relaxed) && super::direct::available()
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
fn direct_shape(geo: &Geometry, c_out: usize) -> super::direct::Shape {
    super::direct::Shape {
        c_in: geo.c_in,
        c_out,
        k: geo.k,
        pad: geo.pad,
        input: geo.input,
        padded: geo.padded,
        output: geo.output,
    }
}

fn check_weight<T: Real>(weight: &Tensor<T>, bias: Option<&Tensor<T>>, c_in: usize) -> Result<(usize, usize)> {
    let ws = weight.shape();
    ensure!(
        ws.len() == 5 && ws[2] == ws[3] && ws[3] == ws[4],
        Dimension,
        "conv weight must be C_out×C_in×k×k×k, got {ws:?}"
    );
    ensure!(
        ws[1] == c_in,
        Dimension,
        "conv expects {} input channels, got {c_in}",
        ws[1]
    );
    if let Some(bias) = bias {
        ensure!(
            bias.shape() == [ws[0]],
            Dimension,
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            ws[0]
        );
    }
    Ok((ws[0], ws[2]))
}

/// Forward pass: `B×C_in×D×H×W → B×C_out×D'×H'×W'`.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (batch, c_in, spatial) = input.dims5()?;
    let (c_out, k) = check_weight(weight, Some(bias), c_in)?;
    let geo = Geometry::new(c_in, k, pad, spatial)?;
    let (in_len, out_vox) = (c_in * geo.in_voxels(), geo.out_voxels());
    let [od, oh, ow] = geo.output;
    let mut out = Tensor::zeros(&[batch, c_out, od, oh, ow]);
    let x = input.data();
    #[cfg(target_arch = "x86_64")]
    if let (true, Some(x32), Some(w32), Some(b32)) = (
        simd_kernels_active(),
        T::as_f32(x),
        T::as_f32(weight.data()),
        T::as_f32(bias.data()),
    ) {
        use super::direct;
        let shape = direct_shape(&geo, c_out);
        let packed = direct::pack_weights(w32, &shape);
        par::for_each_chunk_mut(out.data_mut(), c_out * out_vox, |b, y| {
            let y32 = T::as_f32_mut(y).expect("same element type as the input");
            let xpad = direct::pad_input(&x32[b * in_len..(b + 1) * in_len], &shape);
            direct::forward_sample(&xpad, &packed, b32, &shape, y32);
        });
        return Ok(out);
    }
    let (span, len, rows, plane) = (geo.span(), geo.shift_len(), geo.shift_rows(), geo.plane());
    let slices = geo.weight_slices(weight.data(), c_out);
    par::for_each_chunk_mut(out.data_mut(), c_out * out_vox, |b, y| {
        let shifted = geo.shifted(&x[b * in_len..(b + 1) * in_len]);
        let mut acc = vec![T::zero(); c_out * span];
        for (kd, w) in slices.iter().enumerate() {
            let beta = if kd == 0 { T::zero() } else { T::one() };
            T::gemm_strided(c_out, rows, span, w, &shifted[kd * plane..], len, beta, &mut acc);
        }
        for co in 0..c_out {
            let bv = bias.data()[co];
            let a = &acc[co * span..(co + 1) * span];
            for z in 0..od {
                for yy in 0..oh {
                    let src = geo.anchor(z, yy);
                    let dst = co * out_vox + (z * oh + yy) * ow;
                    y[dst..dst + ow]
                        .iter_mut()
                        .zip(&a[src..src + ow])
                        .for_each(|(o, &v)| *o = v + bv);
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv3d_forward`] given the forward input.
pub fn conv3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    want_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, c_in, spatial) = input.dims5()?;
    let ws = weight.shape();
    let (c_out, k) = check_weight(weight, None, c_in)?;
    let geo = Geometry::new(c_in, k, pad, spatial)?;
    let [od, oh, ow] = geo.output;
    ensure!(
        grad_out.shape() == [batch, c_out, od, oh, ow],
        Dimension,
        "grad_out shape {:?} does not match forward output {:?}",
        grad_out.shape(),
        [batch, c_out, od, oh, ow]
    );
    let (in_len, out_vox) = (c_in * geo.in_voxels(), geo.out_voxels());
    let (span, len, rows, plane) = (geo.span(), geo.shift_len(), geo.shift_rows(), geo.plane());
    let x = input.data();
    let g = grad_out.data();

    // The input gradient is a correlation of grad_out with the spatially
    // flipped, channel-transposed kernel.
    let gx_all = if want_input_grad {
        let mut flipped = Tensor::zeros(&[c_in, c_out, k, k, k]);
        let w = weight.data();
        let fd = flipped.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                for t in 0..k * k * k {
                    fd[(ci * c_out + co) * k * k * k + (k * k * k - 1 - t)] = w[(co * c_in + ci) * k * k * k + t];
                }
            }
        }
        ensure!(pad < k, Dimension, "padding {pad} must be smaller than kernel {k}");
        Some(conv3d_forward(
            grad_out,
            &flipped,
            &Tensor::zeros(&[c_in]),
            k - 1 - pad,
        )?)
    } else {
        None
    };
    if let Some(gx) = &gx_all {
        ensure!(
            gx.shape() == input.shape(),
            Dimension,
            "input gradient shape {:?} differs from input {:?}",
            gx.shape(),
            input.shape()
        );
    }

    // Per-sample weight partials, reduced below in sample order.
    let partials = par::map_range(batch, |b| {
        #[cfg(target_arch = "x86_64")]
        if let (true, Some(x32), Some(g32)) = (simd_kernels_active(), T::as_f32(x), T::as_f32(g)) {
            use super::direct;
            let shape = direct_shape(&geo, c_out);
            let xpad = direct::pad_input(&x32[b * in_len..(b + 1) * in_len], &shape);
            let mut gw = vec![T::zero(); c_out * c_in * k * k * k];
            let mut gbias = vec![T::zero(); c_out];
            direct::weight_grad_sample(
                &xpad,
                &g32[b * c_out * out_vox..(b + 1) * c_out * out_vox],
                &shape,
                T::as_f32_mut(&mut gw).expect("f32"),
                T::as_f32_mut(&mut gbias).expect("f32"),
            );
            return (gw, gbias);
        }
        let gb = &g[b * c_out * out_vox..(b + 1) * c_out * out_vox];
        let shifted = geo.shifted(&x[b * in_len..(b + 1) * in_len]);
        // grad_out laid out on the padded anchor grid, transposed to
        // span × C_out.
        let [od, oh, ow] = geo.output;
        let mut gt = vec![T::zero(); span * c_out];
        for co in 0..c_out {
            for z in 0..od {
                for yy in 0..oh {
                    let a = geo.anchor(z, yy);
                    let src = co * out_vox + (z * oh + yy) * ow;
                    for xx in 0..ow {
                        gt[(a + xx) * c_out + co] = gb[src + xx];
                    }
                }
            }
        }
        let mut gw = vec![T::zero(); c_out * c_in * k * k * k];
        let mut part = vec![T::zero(); rows * c_out];
        for kd in 0..k {
            T::gemm_a_strided(
                rows,
                span,
                c_out,
                &shifted[kd * plane..],
                len,
                &gt,
                T::zero(),
                &mut part,
            );
            for r in 0..rows {
                let (ci, khw) = (r / (k * k), r % (k * k));
                for co in 0..c_out {
                    gw[((co * c_in + ci) * k + kd) * k * k + khw] = part[r * c_out + co];
                }
            }
        }
        let gbias: Vec<T> = gb.chunks(out_vox).map(|c| c.iter().copied().sum()).collect();
        (gw, gbias)
    });

    let mut gw = Tensor::zeros(ws);
    let mut gbias = Tensor::zeros(&[c_out]);
    for (pw, pb) in partials {
        gw.data_mut().iter_mut().zip(&pw).for_each(|(a, &v)| *a += v);
        gbias.data_mut().iter_mut().zip(&pb).for_each(|(a, &v)| *a += v);
    }
    Ok(ConvGrads {
        input: gx_all,
        weight: gw,
        bias: gbias,
    })
}

/// Convolution layer with cached forward input.
#[derive(Debug, Clone)]
pub struct Conv3dLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub padding: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv3dLayer<T> {
    /// Shape-preserving layer (padding `(k-1)/2`) with fan-in scaled
    /// uniform initialization `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(k % 2 == 1, Config, "kernel size must be odd, got {k}");
        ensure!(c_in > 0 && c_out > 0, Config, "channel counts must be positive");
        let fan_in = c_in * k * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect()
        };
        let w = draw(c_out * fan_in);
        let b = draw(c_out);
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), Tensor::from_vec(&[c_out, c_in, k, k, k], w)?),
            bias: Param::new(format!("{name}.bias"), Tensor::from_vec(&[c_out], b)?),
            padding: (k - 1) / 2,
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&mut self, input: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let out = conv3d_forward(input, &self.weight.value, &self.bias.value, self.padding)?;
        self.cache = keep_cache.then(|| input.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// requested.
    pub fn backward(&mut self, grad_out: &Tensor<T>, want_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let input = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("conv backward called without a cached forward pass".into()))?;
        let grads = conv3d_backward(grad_out, input, &self.weight.value, self.padding, want_input_grad)?;
        self.weight.grad.add_assign(&grads.weight)?;
        self.bias.grad.add_assign(&grads.bias)?;
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cached_input(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref()
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}
