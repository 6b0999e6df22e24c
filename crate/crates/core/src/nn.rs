//! Layer primitives with hand-written backward passes.
//!
//! Everything operates on single images stored channel-major (`C × H × W`,
//! row-major inside each plane). Forward passes take `&self` and return a
//! cache; backward passes accumulate parameter gradients into [`Param::grad`].

use rand::Rng;

/// Negative slope of every leaky-rectified activation in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// A named, trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    /// Uniform init scaled by fan-in, with the leaky-ReLU gain folded in.
    pub fn fan_in_uniform<R: Rng>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Param::zeros(name, shape);
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
        for v in &mut p.value {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Dims {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

// ---------------------------------------------------------------------------
// dense products

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride/extent pair stays within the slices checked by the
    // callers (a: m*k, b: k*n, c: m*n, all dense).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// 3×3 convolution, padding 1

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    input: Dims,
    output: Dims,
}

impl Conv3x3 {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * 9;
        Conv3x3 {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, 3, 3],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        let s = self.stride;
        Dims::new(
            self.out_channels,
            input.height.div_ceil(s),
            input.width.div_ceil(s),
        )
    }

    fn im2col(&self, x: &[f64], input: Dims, output: Dims) -> Vec<f64> {
        let p = output.plane();
        let mut cols = vec![0.0; self.in_channels * 9 * p];
        let (h, w) = (input.height as isize, input.width as isize);
        for ci in 0..self.in_channels {
            let plane = &x[ci * input.plane()..(ci + 1) * input.plane()];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..output.height {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * input.width..][..input.width];
                        let dst = &mut row[oy * output.width..][..output.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], input: Dims, output: Dims) -> Vec<f64> {
        let p = output.plane();
        let mut dx = vec![0.0; input.len()];
        let (h, w) = (input.height as isize, input.width as isize);
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * input.plane()..(ci + 1) * input.plane()];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..output.height {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * input.width..][..input.width];
                        let src = &row[oy * output.width..][..output.width];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &[f64], input: Dims) -> (Vec<f64>, ConvCache) {
        debug_assert_eq!(input.channels, self.in_channels);
        debug_assert_eq!(x.len(), input.len());
        let output = self.output_dims(input);
        let p = output.plane();
        let k = self.in_channels * 9;
        let cols = self.im2col(x, input, output);
        let mut out = vec![0.0; output.len()];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[co]);
        }
        gemm(
            self.out_channels,
            k,
            p,
            &self.weight.value,
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            1.0,
            &mut out,
        );
        (
            out,
            ConvCache {
                cols,
                input,
                output,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, dout: &[f64]) -> Vec<f64> {
        let p = cache.output.plane();
        let k = self.in_channels * 9;
        for (co, row) in dout.chunks(p).enumerate() {
            self.bias.grad[co] += row.iter().sum::<f64>();
        }
        // dW += dout · colsᵀ
        gemm(
            self.out_channels,
            p,
            k,
            dout,
            (p as isize, 1),
            &cache.cols,
            (1, p as isize),
            1.0,
            &mut self.weight.grad,
        );
        // dcols = Wᵀ · dout
        let mut dcols = vec![0.0; k * p];
        gemm(
            k,
            self.out_channels,
            p,
            &self.weight.value,
            (1, k as isize),
            dout,
            (p as isize, 1),
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, cache.input, cache.output)
    }
}

// ---------------------------------------------------------------------------
// fully connected

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_features, in_features],
                in_features,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_features);
        let mut y = self.bias.value.clone();
        gemm(
            self.out_features,
            self.in_features,
            1,
            &self.weight.value,
            (self.in_features as isize, 1),
            x,
            (1, 1),
            1.0,
            &mut y,
        );
        y
    }

    /// `x` is the forward input; returns the gradient with respect to it.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        for (b, g) in self.bias.grad.iter_mut().zip(dy) {
            *b += g;
        }
        gemm(
            self.out_features,
            1,
            self.in_features,
            dy,
            (1, 1),
            x,
            (1, 1),
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = vec![0.0; self.in_features];
        gemm(
            self.in_features,
            self.out_features,
            1,
            &self.weight.value,
            (1, self.in_features as isize),
            dy,
            (1, 1),
            0.0,
            &mut dx,
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// pointwise

pub fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// `pre` is the pre-activation input.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// sub-pixel rearrangement

/// `(C·r², H, W) → (C, H·r, W·r)`.
pub fn pixel_shuffle(x: &[f64], input: Dims, r: usize) -> (Vec<f64>, Dims) {
    let out = Dims::new(input.channels / (r * r), input.height * r, input.width * r);
    debug_assert_eq!(out.channels * r * r, input.channels);
    let mut y = vec![0.0; out.len()];
    for c in 0..out.channels {
        for dy in 0..r {
            for dx in 0..r {
                let ci = c * r * r + dy * r + dx;
                let src = &x[ci * input.plane()..][..input.plane()];
                for iy in 0..input.height {
                    let oy = iy * r + dy;
                    let row = &mut y[c * out.plane() + oy * out.width..][..out.width];
                    for ix in 0..input.width {
                        row[ix * r + dx] = src[iy * input.width + ix];
                    }
                }
            }
        }
    }
    (y, out)
}

/// Exact inverse of [`pixel_shuffle`]; also its adjoint, so it serves as the
/// backward pass.
pub fn pixel_unshuffle(y: &[f64], out: Dims, r: usize) -> Vec<f64> {
    let input = Dims::new(out.channels * r * r, out.height / r, out.width / r);
    let mut x = vec![0.0; input.len()];
    for c in 0..out.channels {
        for dy in 0..r {
            for dx in 0..r {
                let ci = c * r * r + dy * r + dx;
                let dst = &mut x[ci * input.plane()..][..input.plane()];
                for iy in 0..input.height {
                    let oy = iy * r + dy;
                    let row = &y[c * out.plane() + oy * out.width..][..out.width];
                    for ix in 0..input.width {
                        dst[iy * input.width + ix] = row[ix * r + dx];
                    }
                }
            }
        }
    }
    x
}
