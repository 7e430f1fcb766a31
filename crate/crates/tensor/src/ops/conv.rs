//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::graph::{Graph, Operator, Var};
use crate::tensor::{Shape, Tensor};

/// Sliding-window geometry shared by convolution and its transpose.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Window {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Window { c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output `o` and tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let s = (o * stride + t) as isize - pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }

    /// Unfolds one `c × h × w` image into a `(c·k·k) × (ho·wo)` matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let n_cols = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * n_cols;
                    let out = &mut cols[row..row + n_cols];
                    for oy in 0..self.ho {
                        let seg = &mut out[oy * self.wo..(oy + 1) * self.wo];
                        match Self::src(oy, ky, self.stride, self.pad, self.h) {
                            None => seg.fill(0.0),
                            Some(iy) => {
                                let line = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kx, self.stride, self.pad, self.w) {
                                        Some(ix) => line[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds columns back into an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let n_cols = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * n_cols;
                    let src = &cols[row..row + n_cols];
                    for oy in 0..self.ho {
                        let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else { continue };
                        let seg = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, v) in seg.iter().enumerate() {
                            if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                plane[iy * self.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_square_kernel(op: &'static str, w: Shape) -> Result<usize> {
    if w.h != w.w || w.h == 0 {
        return Err(TensorError::dim(op, format!("kernel {w} is not square")));
    }
    Ok(w.h)
}

fn check_bias(op: &'static str, b: Option<&Tensor>, out_ch: usize) -> Result<()> {
    if let Some(b) = b {
        let want = Shape::new(1, out_ch, 1, 1);
        if b.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: want,
                actual: b.shape(),
            });
        }
    }
    Ok(())
}

/// Cross-correlation of `x` (`n × in × h × w`) with `weight` (`out × in × k × k`)
/// plus an optional per-channel bias of shape `1 × out × 1 × 1`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    let k = check_square_kernel("conv2d", ws)?;
    if xs.c != ws.c {
        return Err(TensorError::dim(
            "conv2d",
            format!("input has {} channels, kernel {ws} expects {}", xs.c, ws.c),
        ));
    }
    check_bias("conv2d", bias, ws.n)?;
    let win = Window::new(xs.c, xs.h, xs.w, k, stride, pad)
        .ok_or_else(|| TensorError::dim("conv2d", format!("kernel {k} stride {stride} pad {pad} does not fit {xs}")))?;
    let out_shape = Shape::new(xs.n, ws.n, win.ho, win.wo);
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for n in 0..xs.n {
        win.im2col(x.item(n), &mut cols);
        let o = out.item_mut(n);
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(win.cols()).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(ws.n, win.rows(), win.cols(), weight.data(), Layout::Normal, &cols, Layout::Normal, beta, o);
    }
    Ok(out)
}

/// Fractionally strided convolution. `weight` is `in × out × k × k`; the
/// output extent is `(h − 1)·stride − 2·pad + k`.
pub fn conv_transpose2d_forward(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    let k = check_square_kernel("conv_transpose2d", ws)?;
    if xs.c != ws.n {
        return Err(TensorError::dim(
            "conv_transpose2d",
            format!("input has {} channels, kernel {ws} expects {}", xs.c, ws.n),
        ));
    }
    let win = transpose_window(xs, ws, k, stride, pad)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, win.h, win.w));
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for n in 0..xs.n {
        gemm(win.rows(), ws.n, win.cols(), weight.data(), Layout::Transposed, x.item(n), Layout::Normal, 0.0, &mut cols);
        win.col2im(&cols, out.item_mut(n));
    }
    Ok(out)
}

fn transpose_window(xs: Shape, ws: Shape, k: usize, stride: usize, pad: usize) -> Result<Window> {
    let span = |e: usize| ((e.max(1) - 1) * stride + k).checked_sub(2 * pad).filter(|v| *v > 0);
    let (Some(h), Some(w)) = (span(xs.h), span(xs.w)) else {
        return Err(TensorError::dim(
            "conv_transpose2d",
            format!("kernel {k} stride {stride} pad {pad} gives an empty output for {xs}"),
        ));
    };
    let win = Window::new(ws.c, h, w, k, stride, pad)
        .filter(|win| win.ho == xs.h && win.wo == xs.w)
        .ok_or_else(|| TensorError::dim("conv_transpose2d", format!("inconsistent geometry for {xs}")))?;
    Ok(win)
}

struct Conv2d {
    stride: usize,
    pad: usize,
}

impl Operator for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (xs, ws) = (x.shape(), w.shape());
        let win = Window::new(xs.c, xs.h, xs.w, ws.h, self.stride, self.pad).expect("validated in forward");
        let mut gx = needs[0].then(|| Tensor::zeros(xs));
        let mut gw = needs[1].then(|| Tensor::zeros(ws));
        let mut gb = needs.get(2).copied().unwrap_or(false).then(|| Tensor::zeros(inputs[2].shape()));
        let mut cols = vec![0.0; win.rows() * win.cols()];
        for n in 0..xs.n {
            let go = grad.item(n);
            if let Some(gw) = gw.as_mut() {
                win.im2col(x.item(n), &mut cols);
                gemm(ws.n, win.cols(), win.rows(), go, Layout::Normal, &cols, Layout::Transposed, 1.0, gw.data_mut());
            }
            if let Some(gb) = gb.as_mut() {
                for (oc, chunk) in go.chunks(win.cols()).enumerate() {
                    gb.data_mut()[oc] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(gx) = gx.as_mut() {
                gemm(win.rows(), ws.n, win.cols(), w.data(), Layout::Transposed, go, Layout::Normal, 0.0, &mut cols);
                win.col2im(&cols, gx.item_mut(n));
            }
        }
        let mut res = vec![gx, gw];
        if inputs.len() == 3 {
            res.push(gb);
        }
        Ok(res)
    }
}

struct ConvTranspose2d {
    stride: usize,
    pad: usize,
}

impl Operator for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (xs, ws) = (x.shape(), w.shape());
        let win = transpose_window(xs, ws, ws.h, self.stride, self.pad)?;
        let mut gx = needs[0].then(|| Tensor::zeros(xs));
        let mut gw = needs[1].then(|| Tensor::zeros(ws));
        let mut cols = vec![0.0; win.rows() * win.cols()];
        for n in 0..xs.n {
            win.im2col(grad.item(n), &mut cols);
            if let Some(gx) = gx.as_mut() {
                gemm(ws.n, win.rows(), win.cols(), w.data(), Layout::Normal, &cols, Layout::Normal, 0.0, gx.item_mut(n));
            }
            if let Some(gw) = gw.as_mut() {
                gemm(ws.n, win.cols(), win.rows(), x.item(n), Layout::Normal, &cols, Layout::Transposed, 1.0, gw.data_mut());
            }
        }
        Ok(vec![gx, gw])
    }
}

impl Graph<'_> {
    /// Zero-padded convolution with optional bias; see [`conv2d_forward`].
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(Conv2d { stride, pad }, &inputs, out))
    }

    /// Transposed convolution without bias; see [`conv_transpose2d_forward`].
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv_transpose2d_forward(self.value(x), self.value(weight), stride, pad)?;
        Ok(self.record(ConvTranspose2d { stride, pad }, &[x, weight], out))
    }
}
