//! Spatial resampling: bilinear resize, 2×2 average pooling and edge padding.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operator, Var};
use crate::tensor::{Shape, Tensor};

/// Two-tap linear interpolation weights along one axis, half-pixel centres,
/// clamped at the borders.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn resize_plane(src: &[f64], w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], dst: &mut [f64]) {
    let wo = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
}

fn resize_plane_adjoint(grad: &[f64], w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], dst: &mut [f64]) {
    let wo = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = grad[oy * wo + ox];
            dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            dst[y0 * w + x1] += g * (1.0 - fy) * fx;
            dst[y1 * w + x0] += g * fy * (1.0 - fx);
            dst[y1 * w + x1] += g * fy * fx;
        }
    }
}

/// Bilinear resize of every plane to `h × w` (half-pixel centres, clamped edges).
pub fn resize_bilinear_forward(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || h == 0 || w == 0 {
        return Err(TensorError::dim("resize_bilinear", format!("cannot resize {s} to {h}×{w}")));
    }
    let (ty, tx) = (axis_taps(s.h, h), axis_taps(s.w, w));
    let mut out = Tensor::zeros(s.with_hw(h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            resize_plane(x.plane(n, c), s.w, &ty, &tx, out.plane_mut(n, c));
        }
    }
    Ok(out)
}

struct ResizeBilinear;

impl Operator for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let os = out.shape();
        let (ty, tx) = (axis_taps(s.h, os.h), axis_taps(s.w, os.w));
        let mut gx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                resize_plane_adjoint(grad.plane(n, c), s.w, &ty, &tx, gx.plane_mut(n, c));
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Non-overlapping 2×2 mean; extents must be even.
pub fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(TensorError::dim("avg_pool2", format!("{s} has odd spatial extent")));
    }
    Ok(Tensor::from_fn(s.with_hw(s.h / 2, s.w / 2), |n, c, y, xx| {
        0.25 * (x.at(n, c, 2 * y, 2 * xx)
            + x.at(n, c, 2 * y, 2 * xx + 1)
            + x.at(n, c, 2 * y + 1, 2 * xx)
            + x.at(n, c, 2 * y + 1, 2 * xx + 1))
    }))
}

struct AvgPool2;

impl Operator for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::from_fn(inputs[0].shape(), |n, c, y, x| {
            0.25 * grad.at(n, c, y / 2, x / 2)
        }))])
    }
}

/// Pads every plane by `pad` on each side, repeating the edge values.
pub fn pad_replicate_forward(x: &Tensor, pad: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s.with_hw(s.h + 2 * pad, s.w + 2 * pad), |n, c, y, xx| {
        let sy = y.saturating_sub(pad).min(s.h - 1);
        let sx = xx.saturating_sub(pad).min(s.w - 1);
        x.at(n, c, sy, sx)
    })
}

struct PadReplicate {
    pad: usize,
}

impl Operator for PadReplicate {
    fn name(&self) -> &'static str {
        "pad_replicate"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let os: Shape = out.shape();
        let mut gx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..os.h {
                    let sy = y.saturating_sub(self.pad).min(s.h - 1);
                    for xx in 0..os.w {
                        let sx = xx.saturating_sub(self.pad).min(s.w - 1);
                        let i = gx.index(n, c, sy, sx);
                        gx.data_mut()[i] += grad.at(n, c, y, xx);
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

impl Graph<'_> {
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = resize_bilinear_forward(self.value(x), h, w)?;
        Ok(self.record(ResizeBilinear, &[x], out))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = avg_pool2_forward(self.value(x))?;
        Ok(self.record(AvgPool2, &[x], out))
    }

    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::dim("pad_replicate", format!("empty input {s}")));
        }
        let out = pad_replicate_forward(self.value(x), pad);
        Ok(self.record(PadReplicate { pad }, &[x], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resize_preserves_constants_and_linear_interiors() {
        let c = Tensor::full([1, 2, 3, 5], 1.5);
        let up = resize_bilinear_forward(&c, 6, 10).unwrap();
        assert!(up.data().iter().all(|v| (v - 1.5).abs() < 1e-15));

        // A horizontal ramp stays a ramp (in source coordinates) away from the clamped border.
        let ramp = Tensor::from_fn([1, 1, 2, 4], |_, _, _, x| x as f64);
        let up = resize_bilinear_forward(&ramp, 4, 8).unwrap();
        for x in 1..7 {
            assert!((up.at(0, 0, 1, x) - (x as f64 / 2.0 - 0.25)).abs() < 1e-15);
        }
        assert_eq!(up.at(0, 0, 0, 0), 0.0);
        assert_eq!(up.at(0, 0, 0, 7), 3.0);
    }

    #[test]
    fn pooling_and_padding_shapes() {
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        let p = avg_pool2_forward(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(avg_pool2_forward(&Tensor::zeros([1, 1, 3, 4])).is_err());
        let r = pad_replicate_forward(&x, 1);
        assert_eq!(r.shape(), Shape::new(1, 1, 6, 6));
        assert_eq!(r.at(0, 0, 0, 0), 0.0);
        assert_eq!(r.at(0, 0, 5, 5), 15.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform([1, 2, 4, 6], -1.0, 1.0, &mut rng);
        for (name, r) in [
            ("up", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| g.resize_bilinear(v[0], 8, 12))),
            ("down", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| g.resize_bilinear(v[0], 2, 3))),
            ("pool", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| g.avg_pool2(v[0]))),
            ("pad", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| g.pad_replicate(v[0], 2))),
        ] {
            let r = r.unwrap();
            assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
        }
    }
}
