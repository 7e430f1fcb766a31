//! Bilinear displacement of feature maps (and images) along a flow field.
//!
//! `out(c, y, x) = Σ F(c, yᵢ, xᵢ)·(1 − |x + u − xᵢ|)·(1 − |y + v − yᵢ|)` over
//! the four integer neighbours of the sample point. Neighbours outside the
//! map contribute nothing. At integer sample coordinates the upper neighbour
//! carries zero weight, which makes the flow gradient the right-sided
//! difference.

use liteflow_tensor::{Graph, Operator, Result as TResult, Tensor, TensorError, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Sample {
    x0: isize,
    y0: isize,
    ax: f64,
    ay: f64,
}

impl Sample {
    #[inline]
    fn at(x: usize, y: usize, u: f64, v: f64) -> Self {
        let sx = x as f64 + u;
        let sy = y as f64 + v;
        let fx = sx.floor();
        let fy = sy.floor();
        Sample {
            x0: fx as isize,
            y0: fy as isize,
            ax: sx - fx,
            ay: sy - fy,
        }
    }

    /// The four neighbours as (flat index or None, weight).
    #[inline]
    fn taps(&self, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
        let idx = |yy: isize, xx: isize| {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
        };
        [
            (idx(self.y0, self.x0), (1.0 - self.ax) * (1.0 - self.ay)),
            (idx(self.y0, self.x0 + 1), self.ax * (1.0 - self.ay)),
            (idx(self.y0 + 1, self.x0), (1.0 - self.ax) * self.ay),
            (idx(self.y0 + 1, self.x0 + 1), self.ax * self.ay),
        ]
    }
}

fn check(features: &Tensor, flow: &Tensor) -> TResult<()> {
    let (fs, us) = (features.shape(), flow.shape());
    if us.c != 2 || !fs.same_spatial(&us) {
        return Err(TensorError::dim(
            "f_warp",
            format!("features {fs} cannot be warped by flow {us}"),
        ));
    }
    Ok(())
}

/// Forward kernel of [`f_warp`].
pub fn warp_forward(features: &Tensor, flow: &Tensor) -> Result<Tensor> {
    check(features, flow)?;
    let s = features.shape();
    let (h, w) = (s.h, s.w);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let (u, v) = (flow.plane(n, 0), flow.plane(n, 1));
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let taps = Sample::at(x, y, u[p], v[p]).taps(h, w);
                for c in 0..s.c {
                    let src = features.plane(n, c);
                    let mut acc = 0.0;
                    for (i, wt) in taps {
                        if let Some(i) = i {
                            acc += src[i] * wt;
                        }
                    }
                    out.plane_mut(n, c)[p] = acc;
                }
            }
        }
    }
    Ok(out)
}

struct Warp;

impl Operator for Warp {
    fn name(&self) -> &'static str {
        "f_warp"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> TResult<Vec<Option<Tensor>>> {
        let (feat, flow) = (inputs[0], inputs[1]);
        let s = feat.shape();
        let (h, w) = (s.h, s.w);
        let mut gfeat = needs[0].then(|| Tensor::zeros(s));
        let mut gflow = needs[1].then(|| Tensor::zeros(flow.shape()));
        for n in 0..s.n {
            let (u, v) = (flow.plane(n, 0), flow.plane(n, 1));
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let smp = Sample::at(x, y, u[p], v[p]);
                    let taps = smp.taps(h, w);
                    let (mut du, mut dv) = (0.0, 0.0);
                    for c in 0..s.c {
                        let g = grad.plane(n, c)[p];
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(gf) = gfeat.as_mut() {
                            let plane = gf.plane_mut(n, c);
                            for (i, wt) in taps {
                                if let Some(i) = i {
                                    plane[i] += g * wt;
                                }
                            }
                        }
                        if gflow.is_some() {
                            let src = feat.plane(n, c);
                            let val = |t: usize| taps[t].0.map_or(0.0, |i| src[i]);
                            let (f00, f01, f10, f11) = (val(0), val(1), val(2), val(3));
                            du += g * ((1.0 - smp.ay) * (f01 - f00) + smp.ay * (f11 - f10));
                            dv += g * ((1.0 - smp.ax) * (f10 - f00) + smp.ax * (f11 - f01));
                        }
                    }
                    if let Some(gu) = gflow.as_mut() {
                        gu.plane_mut(n, 0)[p] = du;
                        gu.plane_mut(n, 1)[p] = dv;
                    }
                }
            }
        }
        Ok(vec![gfeat, gflow])
    }
}

/// Warps `features` (`n × c × h × w`) towards the first image by `flow`
/// (`n × 2 × h × w`, channel 0 horizontal, in pixels of this resolution).
pub fn f_warp(g: &mut Graph, features: Var, flow: Var) -> Result<Var> {
    let out = warp_forward(g.value(features), g.value(flow))?;
    Ok(g.record(Warp, &[features, flow], out))
}

/// Image warping; the same kernel as [`f_warp`] applied to colour channels.
pub fn image_warp(g: &mut Graph, image: Var, flow: Var) -> Result<Var> {
    if g.shape(image).c != 3 {
        return Err(Error::dim("image_warp", format!("expected 3 channels, got {}", g.shape(image))));
    }
    f_warp(g, image, flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use liteflow_tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = Tensor::uniform([2, 5, 6, 7], -3.0, 3.0, &mut rng(1));
        let out = warp_forward(&f, &Tensor::zeros([2, 2, 6, 7])).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn unit_shift_of_a_ramp() {
        let f = Tensor::from_fn([1, 1, 4, 6], |_, _, _, x| x as f64);
        let flow = Tensor::from_fn([1, 2, 4, 6], |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let out = warp_forward(&f, &flow).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at(0, 0, y, x), x as f64 + 1.0);
            }
            assert_eq!(out.at(0, 0, y, 5), 0.0);
        }
    }

    #[test]
    fn half_pixel_sample_averages() {
        let f = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let flow = Tensor::from_vec([1, 2, 1, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(warp_forward(&f, &flow).unwrap().at(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn integer_flow_is_an_index_shift() {
        let f = Tensor::uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng(2));
        let flow = Tensor::from_fn([1, 2, 5, 5], |_, c, y, x| if c == 0 { (x % 3) as f64 - 1.0 } else { (y % 2) as f64 * 2.0 - 1.0 });
        let out = warp_forward(&f, &flow).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    let sx = x as isize + flow.at(0, 0, y, x) as isize;
                    let sy = y as isize + flow.at(0, 1, y, x) as isize;
                    let want = if (0..5).contains(&sx) && (0..5).contains(&sy) {
                        f.at(0, c, sy as usize, sx as usize)
                    } else {
                        0.0
                    };
                    assert_eq!(out.at(0, c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn linear_in_features() {
        let mut r = rng(3);
        let f1 = Tensor::uniform([1, 2, 5, 6], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform([1, 2, 5, 6], -1.0, 1.0, &mut r);
        let flow = Tensor::uniform([1, 2, 5, 6], -2.0, 2.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let mix = f1.zip_map(&f2, |x, y| a * x + b * y).unwrap();
        let lhs = warp_forward(&mix, &flow).unwrap();
        let w1 = warp_forward(&f1, &flow).unwrap();
        let w2 = warp_forward(&f2, &flow).unwrap();
        let rhs = w1.zip_map(&w2, |x, y| a * x + b * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_extents() {
        let f = Tensor::zeros([1, 3, 4, 4]);
        assert!(warp_forward(&f, &Tensor::zeros([1, 2, 4, 5])).is_err());
        assert!(warp_forward(&f, &Tensor::zeros([1, 3, 4, 4])).is_err());
    }

    #[test]
    fn gradients_wrt_features_and_flow() {
        let mut r = rng(4);
        let f = Tensor::uniform([2, 3, 6, 6], -1.0, 1.0, &mut r);
        // Keep sample points away from integer coordinates.
        let flow = Tensor::uniform([2, 2, 6, 6], -2.0, 2.0, &mut r).map(|v| v.trunc() + 0.37 * v.signum());
        let rep = finite_diff_check(&[f, flow], &[true, true], 1e-5, |g, v| Ok(f_warp(g, v[0], v[1])?)).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}
