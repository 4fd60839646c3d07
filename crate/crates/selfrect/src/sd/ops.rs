//! Batch-1 CPU tensor kernels in f32.

use matrixmultiply::sgemm;

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "map buffer size");
        Self { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(c, h, w, vec![0.0; c * h * w])
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Map) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Map) -> Map {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Map::new(self.c + other.c, self.h, self.w, data)
    }

    /// `(tokens, channels)` row-major view, i.e. the transpose.
    pub fn to_tokens(&self) -> Vec<f32> {
        let n = self.plane();
        let mut out = vec![0.0; n * self.c];
        for c in 0..self.c {
            for i in 0..n {
                out[i * self.c + c] = self.data[c * n + i];
            }
        }
        out
    }

    pub fn from_tokens(tokens: &[f32], c: usize, h: usize, w: usize) -> Map {
        let n = h * w;
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                data[ch * n + i] = tokens[i * c + ch];
            }
        }
        Map::new(c, h, w, data)
    }
}

/// `c = a · b (+ c if accumulate)`, all row-major: `a` is `m×k`, `b` is `k×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x · wᵀ + bias` where `x` is `rows×inp` and `w` is `out×inp`.
pub fn linear(x: &[f32], rows: usize, w: &[f32], bias: Option<&[f32]>, out: usize) -> Vec<f32> {
    let inp = w.len() / out;
    assert_eq!(x.len(), rows * inp, "linear input width");
    let mut y = vec![0.0; rows * out];
    if let Some(b) = bias {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
    }
    if rows > 0 {
        // SAFETY: w is out×inp read transposed through its strides.
        unsafe {
            sgemm(
                rows,
                inp,
                out,
                1.0,
                x.as_ptr(),
                inp as isize,
                1,
                w.as_ptr(),
                1,
                inp as isize,
                if bias.is_some() { 1.0 } else { 0.0 },
                y.as_mut_ptr(),
                out as isize,
                1,
            );
        }
    }
    y
}

/// Upper bound on the im2col scratch buffer, in floats.
const COL_BUDGET: usize = 1 << 24;

/// 2-D convolution. `weight` is `out×c×k×k`. `pad` is (top, left, bottom, right).
pub fn conv2d(
    x: &Map,
    weight: &[f32],
    bias: Option<&[f32]>,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: (usize, usize, usize, usize),
) -> Map {
    let (pt, pl, pb, pr) = pad;
    assert_eq!(weight.len(), out_c * x.c * k * k, "conv weight shape");
    let ho = (x.h + pt + pb - k) / stride + 1;
    let wo = (x.w + pl + pr - k) / stride + 1;
    let mut out = Map::zeros(out_c, ho, wo);
    if let Some(b) = bias {
        for (o, bv) in b.iter().enumerate() {
            out.data[o * ho * wo..(o + 1) * ho * wo].fill(*bv);
        }
    }
    let kk = x.c * k * k;
    if k == 1 && stride == 1 && pad == (0, 0, 0, 0) {
        gemm(out_c, kk, ho * wo, weight, &x.data, &mut out.data, true);
        return out;
    }
    // whole output rows per tile, bounded scratch
    let rows_per_tile = (COL_BUDGET / (kk * wo)).clamp(1, ho);
    let mut cols = vec![0.0f32; kk * rows_per_tile * wo];
    let mut tile_out = vec![0.0f32; out_c * rows_per_tile * wo];
    let mut y0 = 0;
    while y0 < ho {
        let rows = rows_per_tile.min(ho - y0);
        let n = rows * wo;
        for c in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..rows {
                        let iy = ((y0 + oy) * stride + ky) as isize - pt as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= x.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x.data[(c * x.h + iy as usize) * x.w..][..x.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            *v = if ix < 0 || ix >= x.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
        gemm(out_c, kk, n, weight, &cols[..kk * n], &mut tile_out[..out_c * n], false);
        for o in 0..out_c {
            let dst = &mut out.data[o * ho * wo + y0 * wo..][..n];
            for (d, s) in dst.iter_mut().zip(&tile_out[o * n..(o + 1) * n]) {
                *d += s;
            }
        }
        y0 += rows;
    }
    out
}

pub fn group_norm(x: &mut Map, groups: usize, gamma: &[f32], beta: &[f32], eps: f32) {
    assert_eq!(x.c % groups, 0, "channels divisible by groups");
    let per = x.c / groups;
    let n = x.plane();
    for g in 0..groups {
        let slice = &mut x.data[g * per * n..(g + 1) * per * n];
        let count = slice.len() as f64;
        let mean = slice.iter().map(|v| *v as f64).sum::<f64>() / count;
        let var = slice.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / count;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for c in 0..per {
            let ch = g * per + c;
            let (a, b) = (gamma[ch] as f64 * inv, beta[ch] as f64);
            for v in &mut slice[c * n..(c + 1) * n] {
                *v = ((*v as f64 - mean) * a + b) as f32;
            }
        }
    }
}

/// Layer norm over the last dimension of a `rows×width` buffer.
pub fn layer_norm(x: &mut [f32], width: usize, gamma: &[f32], beta: &[f32], eps: f32) {
    for row in x.chunks_mut(width) {
        let mean = row.iter().map(|v| *v as f64).sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * inv * gamma[i] as f64 + beta[i] as f64) as f32;
        }
    }
}

pub fn silu(x: &mut [f32]) {
    for v in x {
        *v /= 1.0 + (-*v).exp();
    }
}

/// Exact (erf) GELU.
pub fn gelu(v: f32) -> f32 {
    0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2))
}

pub fn quick_gelu(v: f32) -> f32 {
    v / (1.0 + (-1.702 * v).exp())
}

pub fn upsample_nearest2(x: &Map) -> Map {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Map::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let src = &x.data[(c * x.h + y / 2) * x.w..][..x.w];
            let dst = &mut out.data[(c * h + y) * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

/// Sinusoidal timestep embedding, `[sin, cos]` or `[cos, sin]` when flipped.
pub fn timestep_embedding(t: f32, dim: usize, flip_sin_to_cos: bool, freq_shift: f32) -> Vec<f32> {
    let half = dim / 2;
    let mut sin = Vec::with_capacity(half);
    let mut cos = Vec::with_capacity(half);
    for i in 0..half {
        let exponent = -(10_000f32).ln() * i as f32 / (half as f32 - freq_shift);
        let arg = t * exponent.exp();
        sin.push(arg.sin());
        cos.push(arg.cos());
    }
    let mut out = if flip_sin_to_cos {
        [cos, sin].concat()
    } else {
        [sin, cos].concat()
    };
    out.resize(dim, 0.0);
    out
}
