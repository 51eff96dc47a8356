//! Direct `f32` convolution kernels for x86-64 CPUs with AVX-512F.
//!
//! Output rows are processed 16 voxels at a time, register-blocked over up
//! to 4 rows and 8 output channels. Callers fall back to the GEMM lowering
//! when [`available`] is false.

use std::arch::x86_64::*;

const LANES: usize = 16;
/// Output channels per register block.
const CO_BLOCK: usize = 8;
/// Output channels per weight-gradient block.
const WG_BLOCK: usize = 4;

pub fn available() -> bool {
    std::is_x86_feature_detected!("avx512f")
}

/// Geometry of one sample's convolution (unit stride, cubic kernel).
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub padded: [usize; 3],
    pub output: [usize; 3],
}

impl Shape {
    fn padded_voxels(&self) -> usize {
        self.padded.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.padded[1] * self.padded[2]
    }
}

/// Zero-padded copy of one sample, `C_in × D_p × H_p × W_p`.
pub fn pad_input(x: &[f32], s: &Shape) -> Vec<f32> {
    let [d, h, w] = s.input;
    let [_, hp, wp] = s.padded;
    let pv = s.padded_voxels();
    let mut out = vec![0.0; s.c_in * pv];
    for c in 0..s.c_in {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = c * pv + ((z + s.pad) * hp + y + s.pad) * wp + s.pad;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

/// Weights regrouped per output-channel block as `[ci][tap][c]`.
pub struct PackedWeights {
    blocks: Vec<(usize, usize, Vec<f32>)>,
}

pub fn pack_weights(w: &[f32], s: &Shape) -> PackedWeights {
    let taps = s.k * s.k * s.k;
    let blocks = (0..s.c_out)
        .step_by(CO_BLOCK)
        .map(|start| {
            let cb = CO_BLOCK.min(s.c_out - start);
            let mut data = Vec::with_capacity(s.c_in * taps * cb);
            for ci in 0..s.c_in {
                for t in 0..taps {
                    for c in 0..cb {
                        data.push(w[((start + c) * s.c_in + ci) * taps + t]);
                    }
                }
            }
            (start, cb, data)
        })
        .collect();
    PackedWeights { blocks }
}

fn tail_mask(x0: usize, width: usize) -> u16 {
    let n = (width - x0).min(LANES);
    if n == LANES {
        u16::MAX
    } else {
        (1u16 << n) - 1
    }
}

/// One sample's forward convolution: `xpad` from [`pad_input`], output
/// `C_out × D' × H' × W'`.
pub fn forward_sample(xpad: &[f32], w: &PackedWeights, bias: &[f32], s: &Shape, y: &mut [f32]) {
    assert!(available(), "direct kernels need AVX-512F");
    assert_eq!(xpad.len(), s.c_in * s.padded_voxels());
    assert_eq!(y.len(), s.c_out * s.out_voxels());
    assert_eq!(bias.len(), s.c_out);
    // SAFETY: AVX-512F presence asserted; buffer extents asserted above and
    // every kernel access stays inside them (see `Shape`).
    unsafe { forward_avx512(xpad, w, bias, s, y) }
}

/// `∂L/∂w` and `∂L/∂b` of one sample, accumulated into `gw`
/// (`C_out × C_in × k³`) and `gb`.
pub fn weight_grad_sample(xpad: &[f32], g: &[f32], s: &Shape, gw: &mut [f32], gb: &mut [f32]) {
    assert!(available(), "direct kernels need AVX-512F");
    assert_eq!(xpad.len(), s.c_in * s.padded_voxels());
    assert_eq!(g.len(), s.c_out * s.out_voxels());
    assert_eq!(gw.len(), s.c_out * s.c_in * s.k * s.k * s.k);
    assert_eq!(gb.len(), s.c_out);
    for (co, b) in gb.iter_mut().enumerate() {
        *b += g[co * s.out_voxels()..(co + 1) * s.out_voxels()].iter().sum::<f32>();
    }
    // SAFETY: as in `forward_sample`.
    unsafe { weight_grad_avx512(xpad, g, s, gw) }
}

#[target_feature(enable = "avx512f")]
unsafe fn forward_avx512(xpad: &[f32], w: &PackedWeights, bias: &[f32], s: &Shape, y: &mut [f32]) {
    let [od, oh, ow] = s.output;
    for (start, cb, data) in &w.blocks {
        let rows_max = if *cb <= 4 { 4 } else { 2 };
        for z in 0..od {
            let mut yy = 0;
            while yy < oh {
                let r = rows_max.min(oh - yy);
                for x0 in (0..ow).step_by(LANES) {
                    let at = Anchor {
                        z,
                        y: yy,
                        x0,
                        mask: tail_mask(x0, ow),
                        co: *start,
                    };
                    forward_block(r, *cb, xpad, data, bias, s, &at, y);
                }
                yy += r;
            }
        }
    }
}

struct Anchor {
    z: usize,
    y: usize,
    x0: usize,
    mask: u16,
    co: usize,
}

macro_rules! dispatch_rows {
    ($r:expr, $cb:expr, $f:ident, $($arg:expr),*) => {
        match ($r, $cb) {
            (1, 1) => $f::<1, 1>($($arg),*),
            (1, 2) => $f::<1, 2>($($arg),*),
            (1, 3) => $f::<1, 3>($($arg),*),
            (1, 4) => $f::<1, 4>($($arg),*),
            (1, 5) => $f::<1, 5>($($arg),*),
            (1, 6) => $f::<1, 6>($($arg),*),
            (1, 7) => $f::<1, 7>($($arg),*),
            (1, 8) => $f::<1, 8>($($arg),*),
            (2, 1) => $f::<2, 1>($($arg),*),
            (2, 2) => $f::<2, 2>($($arg),*),
            (2, 3) => $f::<2, 3>($($arg),*),
            (2, 4) => $f::<2, 4>($($arg),*),
            (2, 5) => $f::<2, 5>($($arg),*),
            (2, 6) => $f::<2, 6>($($arg),*),
            (2, 7) => $f::<2, 7>($($arg),*),
            (2, 8) => $f::<2, 8>($($arg),*),
            (3, 1) => $f::<3, 1>($($arg),*),
            (3, 2) => $f::<3, 2>($($arg),*),
            (3, 3) => $f::<3, 3>($($arg),*),
            (3, 4) => $f::<3, 4>($($arg),*),
            (4, 1) => $f::<4, 1>($($arg),*),
            (4, 2) => $f::<4, 2>($($arg),*),
            (4, 3) => $f::<4, 3>($($arg),*),
            (4, 4) => $f::<4, 4>($($arg),*),
            other => unreachable!("no kernel for block {other:?}"),
        }
    };
}

#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_block(
    r: usize,
    cb: usize,
    xpad: &[f32],
    w: &[f32],
    bias: &[f32],
    s: &Shape,
    at: &Anchor,
    y: &mut [f32],
) {
    dispatch_rows!(r, cb, forward_kernel, xpad, w, bias, s, at, y)
}

#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn forward_kernel<const R: usize, const CB: usize>(
    xpad: &[f32],
    w: &[f32],
    bias: &[f32],
    s: &Shape,
    at: &Anchor,
    y: &mut [f32],
) {
    let k = s.k;
    let [_, hp, wp] = s.padded;
    let pv = s.padded_voxels();
    let plane = s.plane();
    let [_, oh, ow] = s.output;
    let ov = s.out_voxels();
    let mask = at.mask;

    let mut acc = [[_mm512_setzero_ps(); CB]; R];
    for row in acc.iter_mut() {
        for (c, a) in row.iter_mut().enumerate() {
            *a = _mm512_set1_ps(bias[at.co + c]);
        }
    }
    let xp = xpad.as_ptr();
    let mut wptr = w.as_ptr();
    for ci in 0..s.c_in {
        for kd in 0..k {
            for kh in 0..k {
                let base = xp.add(ci * pv + (at.z + kd) * plane + (at.y + kh) * wp + at.x0);
                for kw in 0..k {
                    let mut xv = [_mm512_setzero_ps(); R];
                    for (r, v) in xv.iter_mut().enumerate() {
                        *v = _mm512_maskz_loadu_ps(mask, base.add(r * wp + kw));
                    }
                    for c in 0..CB {
                        let wv = _mm512_set1_ps(*wptr.add(c));
                        for r in 0..R {
                            acc[r][c] = _mm512_fmadd_ps(xv[r], wv, acc[r][c]);
                        }
                    }
                    wptr = wptr.add(CB);
                }
            }
        }
    }
    debug_assert!(at.y + R <= oh && hp >= oh);
    let yp = y.as_mut_ptr();
    for r in 0..R {
        for c in 0..CB {
            let dst = yp.add((at.co + c) * ov + (at.z * oh + at.y + r) * ow + at.x0);
            _mm512_mask_storeu_ps(dst, mask, acc[r][c]);
        }
    }
}

#[target_feature(enable = "avx512f")]
unsafe fn weight_grad_avx512(xpad: &[f32], g: &[f32], s: &Shape, gw: &mut [f32]) {
    let k = s.k;
    let taps = k * k * k;
    let mut start = 0;
    while start < s.c_out {
        let cb = WG_BLOCK.min(s.c_out - start);
        for ci in 0..s.c_in {
            for kd in 0..k {
                for kh in 0..k {
                    for kw0 in (0..k).step_by(3) {
                        let kwn = 3.min(k - kw0);
                        let mut sums = [[0.0f32; WG_BLOCK]; 3];
                        weight_grad_block(kwn, cb, xpad, g, s, [start, ci, kd, kh, kw0], &mut sums);
                        for (dk, row) in sums.iter().enumerate().take(kwn) {
                            for (c, &v) in row.iter().enumerate().take(cb) {
                                let t = (kd * k + kh) * k + kw0 + dk;
                                gw[((start + c) * s.c_in + ci) * taps + t] += v;
                            }
                        }
                    }
                }
            }
        }
        start += cb;
    }
}

#[target_feature(enable = "avx512f")]
unsafe fn weight_grad_block(
    kwn: usize,
    cb: usize,
    xpad: &[f32],
    g: &[f32],
    s: &Shape,
    at: [usize; 5],
    sums: &mut [[f32; WG_BLOCK]; 3],
) {
    match (kwn, cb) {
        (1, 1) => weight_grad_kernel::<1, 1>(xpad, g, s, at, sums),
        (1, 2) => weight_grad_kernel::<1, 2>(xpad, g, s, at, sums),
        (1, 3) => weight_grad_kernel::<1, 3>(xpad, g, s, at, sums),
        (1, 4) => weight_grad_kernel::<1, 4>(xpad, g, s, at, sums),
        (2, 1) => weight_grad_kernel::<2, 1>(xpad, g, s, at, sums),
        (2, 2) => weight_grad_kernel::<2, 2>(xpad, g, s, at, sums),
        (2, 3) => weight_grad_kernel::<2, 3>(xpad, g, s, at, sums),
        (2, 4) => weight_grad_kernel::<2, 4>(xpad, g, s, at, sums),
        (3, 1) => weight_grad_kernel::<3, 1>(xpad, g, s, at, sums),
        (3, 2) => weight_grad_kernel::<3, 2>(xpad, g, s, at, sums),
        (3, 3) => weight_grad_kernel::<3, 3>(xpad, g, s, at, sums),
        (3, 4) => weight_grad_kernel::<3, 4>(xpad, g, s, at, sums),
        other => unreachable!("no kernel for block {other:?}"),
    }
}

/// Sums `g[co] · x[ci]` shifted by taps `(kd, kh, kw0..kw0+KW)` over the
/// whole output volume for `CB` output channels.
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn weight_grad_kernel<const KW: usize, const CB: usize>(
    xpad: &[f32],
    g: &[f32],
    s: &Shape,
    [co, ci, kd, kh, kw0]: [usize; 5],
    sums: &mut [[f32; WG_BLOCK]; 3],
) {
    let [_, _, wp] = s.padded;
    let plane = s.plane();
    let [od, oh, ow] = s.output;
    let ov = s.out_voxels();
    let xc = xpad.as_ptr().add(ci * s.padded_voxels());
    let gp = g.as_ptr();
    let mut acc = [[_mm512_setzero_ps(); CB]; KW];
    for z in 0..od {
        for y in 0..oh {
            let xrow = xc.add((z + kd) * plane + (y + kh) * wp + kw0);
            let grow = (z * oh + y) * ow;
            for x0 in (0..ow).step_by(LANES) {
                let mask = tail_mask(x0, ow);
                let mut gv = [_mm512_setzero_ps(); CB];
                for (c, v) in gv.iter_mut().enumerate() {
                    *v = _mm512_maskz_loadu_ps(mask, gp.add((co + c) * ov + grow + x0));
                }
                for (dk, row) in acc.iter_mut().enumerate() {
                    let xv = _mm512_maskz_loadu_ps(mask, xrow.add(x0 + dk));
                    for c in 0..CB {
                        row[c] = _mm512_fmadd_ps(gv[c], xv, row[c]);
                    }
                }
            }
        }
    }
    for (dk, row) in acc.iter().enumerate() {
        for c in 0..CB {
            sums[dk][c] = _mm512_reduce_add_ps(row[c]);
        }
    }
}
