//! Raw slice kernels behind the convolution operators.
//!
//! Convolutions lower to im2col followed by a single-precision GEMM. Shapes
//! are validated by the tape before these are called.

/// Geometry of a strided, zero-padded sliding window over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let span_h = (height + 2 * padding).checked_sub(kernel)?;
        let span_w = (width + 2 * padding).checked_sub(kernel)?;
        Some(Window {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically m×k and
/// `b` logically k×n. A `*_t` flag means the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the three slices, and `c` is exclusively
    // borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfold one C×H×W image into a (C·K·K)×(OH·OW) patch matrix.
pub fn im2col(image: &[f32], win: &Window, cols: &mut [f32]) {
    let Window { channels, height, width, kernel, stride, padding, out_h, out_w } = *win;
    let positions = out_h * out_w;
    for c in 0..channels {
        let plane = &image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let y = (oy * stride + ki) as isize - padding as isize;
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if y < 0 || y >= height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * width..(y as usize + 1) * width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * stride + kj) as isize - padding as isize;
                        *d = if x < 0 || x >= width as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub fn col2im(cols: &[f32], win: &Window, image: &mut [f32]) {
    let Window { channels, height, width, kernel, stride, padding, out_h, out_w } = *win;
    let positions = out_h * out_w;
    for c in 0..channels {
        let plane = &mut image[c * height * width..(c + 1) * height * width];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..out_h {
                    let y = (oy * stride + ki) as isize - padding as isize;
                    if y < 0 || y >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * width..(y as usize + 1) * width];
                    for ox in 0..out_w {
                        let x = (ox * stride + kj) as isize - padding as isize;
                        if x >= 0 && x < width as isize {
                            dst[x as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a conv2d call: input N×C_in×H×W, weight C_out×C_in×K×K.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_out: usize,
    pub win: Window,
}

impl ConvDims {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.win.out_h, self.win.out_w]
    }
}

pub fn conv2d_forward(input: &[f32], weight: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let win = &d.win;
    let in_len = win.channels * win.height * win.width;
    let out_len = d.c_out * win.positions();
    let mut out = vec![0.0; d.batch * out_len];
    let mut cols = if win.is_pointwise() { Vec::new() } else { vec![0.0; win.rows() * win.positions()] };
    for b in 0..d.batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        let patches: &[f32] = if win.is_pointwise() {
            x
        } else {
            im2col(x, win, &mut cols);
            &cols
        };
        gemm(d.c_out, win.rows(), win.positions(), weight, false, patches, false, y, false);
        add_channel_bias(y, bias, win.positions());
    }
    out
}

/// Gradients of conv2d. `dx` is skipped when `need_input` is false, `dw` and
/// `db` when `need_params` is false.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let win = &d.win;
    let in_len = win.channels * win.height * win.width;
    let out_len = d.c_out * win.positions();
    let mut dx = need_input.then(|| vec![0.0; d.batch * in_len]);
    let mut dw = need_params.then(|| vec![0.0; d.c_out * win.rows()]);
    let mut db = need_params.then(|| vec![0.0; d.c_out]);
    let mut cols = vec![0.0; win.rows() * win.positions()];
    for b in 0..d.batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let gy = &grad_out[b * out_len..(b + 1) * out_len];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let patches: &[f32] = if win.is_pointwise() {
                x
            } else {
                im2col(x, win, &mut cols);
                &cols
            };
            gemm(d.c_out, win.positions(), win.rows(), gy, false, patches, true, dw, true);
            accumulate_channel_sums(gy, db, win.positions());
        }
        if let Some(dx) = dx.as_mut() {
            let gx = &mut dx[b * in_len..(b + 1) * in_len];
            if win.is_pointwise() {
                gemm(win.rows(), d.c_out, win.positions(), weight, true, gy, false, gx, false);
            } else {
                gemm(win.rows(), d.c_out, win.positions(), weight, true, gy, false, &mut cols, false);
                col2im(&cols, win, gx);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// Shapes of a transposed convolution: input N×C_in×H×W, weight
/// C_in×C_out×K×K, output N×C_out×OH×OW with OH = (H−1)·s − 2p + K.
///
/// `win` describes the adjoint convolution, i.e. a window over the
/// C_out×OH×OW output whose positions are the H×W input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeDims {
    pub batch: usize,
    pub c_in: usize,
    pub win: Window,
}

impl ConvTransposeDims {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.win.channels, self.win.height, self.win.width]
    }
}

pub fn conv_transpose2d_forward(input: &[f32], weight: &[f32], bias: &[f32], d: &ConvTransposeDims) -> Vec<f32> {
    let win = &d.win;
    let in_len = d.c_in * win.positions();
    let out_len = win.channels * win.height * win.width;
    let mut out = vec![0.0; d.batch * out_len];
    let mut cols = vec![0.0; win.rows() * win.positions()];
    for b in 0..d.batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        gemm(win.rows(), d.c_in, win.positions(), weight, true, x, false, &mut cols, false);
        col2im(&cols, win, y);
        add_channel_bias(y, bias, win.height * win.width);
    }
    out
}

pub fn conv_transpose2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    d: &ConvTransposeDims,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let win = &d.win;
    let in_len = d.c_in * win.positions();
    let out_len = win.channels * win.height * win.width;
    let mut dx = need_input.then(|| vec![0.0; d.batch * in_len]);
    let mut dw = need_params.then(|| vec![0.0; d.c_in * win.rows()]);
    let mut db = need_params.then(|| vec![0.0; win.channels]);
    let mut cols = vec![0.0; win.rows() * win.positions()];
    for b in 0..d.batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let gy = &grad_out[b * out_len..(b + 1) * out_len];
        im2col(gy, win, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let gx = &mut dx[b * in_len..(b + 1) * in_len];
            gemm(d.c_in, win.rows(), win.positions(), weight, false, &cols, false, gx, false);
        }
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            gemm(d.c_in, win.positions(), win.rows(), x, false, &cols, true, dw, true);
            accumulate_channel_sums(gy, db, win.height * win.width);
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

fn add_channel_bias(y: &mut [f32], bias: &[f32], plane: usize) {
    for (chunk, &b) in y.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums(gy: &[f32], db: &mut [f32], plane: usize) {
    for (chunk, acc) in gy.chunks_exact(plane).zip(db.iter_mut()) {
        *acc += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}
