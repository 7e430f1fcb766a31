//! Short-range correlation cost volumes, dense and sparse.
//!
//! The matching cost between `F1(x)` and `F2(x + d)` is their dot product
//! divided by the feature length. Displacements range over
//! `{−r, −r + step, …, r}²`, giving `(2r/step + 1)²` channels ordered with the
//! vertical offset outermost. `F2` samples outside the map count as zero.

use liteflow_tensor::{Graph, Operator, Result as TResult, Shape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Search window and sampling of one cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostVolumeSpec {
    /// Maximum displacement per axis, in pixels of the level.
    pub radius: usize,
    /// Spacing between tested displacements.
    pub disp_step: usize,
    /// Spacing of the positions where costs are computed; 1 is dense.
    pub spatial_stride: usize,
}

impl CostVolumeSpec {
    pub const fn dense(radius: usize) -> Self {
        CostVolumeSpec {
            radius,
            disp_step: 1,
            spatial_stride: 1,
        }
    }

    pub fn validate(&self) -> TResult<()> {
        if self.radius == 0 || self.disp_step == 0 || self.radius % self.disp_step != 0 || self.spatial_stride == 0 {
            return Err(TensorError::dim(
                "correlation",
                format!(
                    "radius {} must be ≥ 1 and divisible by displacement step {} (spatial stride {})",
                    self.radius, self.disp_step, self.spatial_stride
                ),
            ));
        }
        Ok(())
    }

    /// Displacements per axis.
    pub fn side(&self) -> usize {
        2 * self.radius / self.disp_step + 1
    }

    pub fn channels(&self) -> usize {
        self.side() * self.side()
    }

    /// `(dy, dx)` of every output channel.
    pub fn displacements(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let offs: Vec<isize> = (0..self.side()).map(|i| -r + (i * self.disp_step) as isize).collect();
        offs.iter().flat_map(|&dy| offs.iter().map(move |&dx| (dy, dx))).collect()
    }
}

fn check(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> TResult<()> {
    spec.validate()?;
    if f1.shape() != f2.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "correlation",
            expected: f1.shape(),
            actual: f2.shape(),
        });
    }
    Ok(())
}

/// Valid `x` range `[lo, hi)` such that `x + d ∈ [0, extent)` and `x ∈ [0, extent)`.
#[inline]
fn valid_range(d: isize, extent: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (extent as isize - d).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Costs at positions `(y, x)` with `y, x` multiples of `stride`; output has
/// extents `ceil(h / stride) × ceil(w / stride)`.
fn correlate_grid(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> Tensor {
    let s = f1.shape();
    let st = spec.spatial_stride;
    let (gh, gw) = (s.h.div_ceil(st), s.w.div_ceil(st));
    let disps = spec.displacements();
    let mut out = Tensor::zeros(Shape::new(s.n, disps.len(), gh, gw));
    let norm = s.c as f64;
    for n in 0..s.n {
        for (d, &(dy, dx)) in disps.iter().enumerate() {
            let mut acc = vec![0.0; gh * gw];
            for c in 0..s.c {
                let (a, b) = (f1.plane(n, c), f2.plane(n, c));
                for gy in 0..gh {
                    let y = gy * st;
                    let yy = y as isize + dy;
                    if yy < 0 || yy as usize >= s.h {
                        continue;
                    }
                    let (row_a, row_b) = (&a[y * s.w..(y + 1) * s.w], &b[yy as usize * s.w..(yy as usize + 1) * s.w]);
                    let (lo, hi) = valid_range(dx, s.w);
                    let acc_row = &mut acc[gy * gw..(gy + 1) * gw];
                    for (gx, slot) in acc_row.iter_mut().enumerate() {
                        let x = gx * st;
                        if x >= lo && x < hi {
                            *slot += row_a[x] * row_b[(x as isize + dx) as usize];
                        }
                    }
                }
            }
            for (o, a) in out.plane_mut(n, d).iter_mut().zip(acc) {
                *o = a / norm;
            }
        }
    }
    out
}

/// Adjoint of [`correlate_grid`]: accumulates gradients of both features.
fn correlate_grid_adjoint(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec, grid_grad: &Tensor, g1: Option<&mut Tensor>, g2: Option<&mut Tensor>) {
    let s = f1.shape();
    let st = spec.spatial_stride;
    let gw = s.w.div_ceil(st);
    let gh = s.h.div_ceil(st);
    let norm = s.c as f64;
    let (mut g1, mut g2) = (g1, g2);
    for n in 0..s.n {
        for (d, &(dy, dx)) in spec.displacements().iter().enumerate() {
            let gp = grid_grad.plane(n, d);
            let (lo, hi) = valid_range(dx, s.w);
            for c in 0..s.c {
                for gy in 0..gh {
                    let y = gy * st;
                    let yy = y as isize + dy;
                    if yy < 0 || yy as usize >= s.h {
                        continue;
                    }
                    let yy = yy as usize;
                    for gx in 0..gw {
                        let x = gx * st;
                        if x < lo || x >= hi {
                            continue;
                        }
                        let g = gp[gy * gw + gx] / norm;
                        if g == 0.0 {
                            continue;
                        }
                        let xx = (x as isize + dx) as usize;
                        if let Some(g1) = g1.as_deref_mut() {
                            g1.plane_mut(n, c)[y * s.w + x] += g * f2.plane(n, c)[yy * s.w + xx];
                        }
                        if let Some(g2) = g2.as_deref_mut() {
                            g2.plane_mut(n, c)[yy * s.w + xx] += g * f1.plane(n, c)[y * s.w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps from a stride grid back to every position along one
/// axis. Positions past the last grid point are extrapolated linearly so
/// fields linear in space are reproduced exactly.
fn grid_taps(extent: usize, stride: usize) -> Vec<(usize, usize, f64)> {
    let g = extent.div_ceil(stride);
    (0..extent)
        .map(|p| {
            if g == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (p / stride).min(g - 2);
            let t = (p as f64 - (i0 * stride) as f64) / stride as f64;
            (i0, i0 + 1, t)
        })
        .collect()
}

/// Bilinearly fills an `h × w` map from values on the stride grid.
pub fn fill_from_grid(grid: &Tensor, stride: usize, h: usize, w: usize) -> Result<Tensor> {
    let gs = grid.shape();
    if gs.h != h.div_ceil(stride) || gs.w != w.div_ceil(stride) {
        return Err(crate::Error::dim("fill_from_grid", format!("grid {gs} does not cover {h}×{w} at stride {stride}")));
    }
    let (ty, tx) = (grid_taps(h, stride), grid_taps(w, stride));
    let mut out = Tensor::zeros(gs.with_hw(h, w));
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = grid.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * gs.w + x0] * (1.0 - fx) + src[y0 * gs.w + x1] * fx;
                    let bot = src[y1 * gs.w + x0] * (1.0 - fx) + src[y1 * gs.w + x1] * fx;
                    dst[y * w + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

fn fill_from_grid_adjoint(grad: &Tensor, stride: usize, gh: usize, gw: usize) -> Tensor {
    let s = grad.shape();
    let (ty, tx) = (grid_taps(s.h, stride), grid_taps(s.w, stride));
    let mut out = Tensor::zeros(s.with_hw(gh, gw));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = src[y * s.w + x];
                    dst[y0 * gw + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * gw + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * gw + x0] += g * fy * (1.0 - fx);
                    dst[y1 * gw + x1] += g * fy * fx;
                }
            }
        }
    }
    out
}

/// Dense cost volume (`spatial_stride` ignored).
pub fn correlation_forward(f1: &Tensor, f2: &Tensor, radius: usize, disp_step: usize) -> Result<Tensor> {
    let spec = CostVolumeSpec {
        radius,
        disp_step,
        spatial_stride: 1,
    };
    check(f1, f2, &spec)?;
    Ok(correlate_grid(f1, f2, &spec))
}

/// Cost volume computed on the stride grid and interpolated in between.
/// At grid positions the result equals the dense volume exactly.
pub fn sparse_correlation_forward(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> Result<Tensor> {
    check(f1, f2, spec)?;
    let grid = correlate_grid(f1, f2, spec);
    if spec.spatial_stride == 1 {
        return Ok(grid);
    }
    let s = f1.shape();
    fill_from_grid(&grid, spec.spatial_stride, s.h, s.w)
}

struct Correlation {
    spec: CostVolumeSpec,
}

impl Operator for Correlation {
    fn name(&self) -> &'static str {
        "correlation"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> TResult<Vec<Option<Tensor>>> {
        let (f1, f2) = (inputs[0], inputs[1]);
        let s = f1.shape();
        let st = self.spec.spatial_stride;
        let grid_grad = if st == 1 {
            grad.clone()
        } else {
            fill_from_grid_adjoint(grad, st, s.h.div_ceil(st), s.w.div_ceil(st))
        };
        let mut g1 = needs[0].then(|| Tensor::zeros(s));
        let mut g2 = needs[1].then(|| Tensor::zeros(s));
        correlate_grid_adjoint(f1, f2, &self.spec, &grid_grad, g1.as_mut(), g2.as_mut());
        Ok(vec![g1, g2])
    }
}

/// Records a (possibly sparse) cost volume between two feature maps.
pub fn correlation(g: &mut Graph, f1: Var, f2: Var, spec: CostVolumeSpec) -> Result<Var> {
    let out = sparse_correlation_forward(g.value(f1), g.value(f2), &spec)?;
    Ok(g.record(Correlation { spec }, &[f1, f2], out))
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

    fn triple_loop(f1: &Tensor, f2: &Tensor, radius: isize, step: isize) -> Tensor {
        let s = f1.shape();
        let side = (2 * radius / step + 1) as usize;
        Tensor::from_fn([s.n, side * side, s.h, s.w], |n, d, y, x| {
            let dy = -radius + (d / side) as isize * step;
            let dx = -radius + (d % side) as isize * step;
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
                return 0.0;
            }
            let mut acc = 0.0;
            for c in 0..s.c {
                acc += f1.at(n, c, y, x) * f2.at(n, c, yy as usize, xx as usize);
            }
            acc / s.c as f64
        })
    }

    #[test]
    fn channel_count_law() {
        assert_eq!(CostVolumeSpec::dense(3).channels(), 49);
        let sparse = CostVolumeSpec {
            radius: 6,
            disp_step: 2,
            spatial_stride: 2,
        };
        assert_eq!(sparse.channels(), 49);
        assert_eq!(CostVolumeSpec::dense(4).channels(), 81);
        assert!(CostVolumeSpec { radius: 3, disp_step: 2, spatial_stride: 1 }.validate().is_err());
    }

    #[test]
    fn self_match_at_zero_displacement() {
        let f = Tensor::uniform([1, 4, 5, 5], -1.0, 1.0, &mut rng(1));
        let cv = correlation_forward(&f, &f, 1, 1).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let want: f64 = (0..4).map(|c| f.at(0, c, y, x).powi(2)).sum::<f64>() / 4.0;
                assert!((cv.at(0, 4, y, x) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn orthogonal_features_cost_nothing() {
        let f1 = Tensor::from_fn([1, 2, 4, 4], |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let f2 = Tensor::from_fn([1, 2, 4, 4], |_, c, _, _| if c == 1 { 1.0 } else { 0.0 });
        assert_eq!(correlation_forward(&f1, &f2, 2, 1).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn matches_triple_loop() {
        let mut r = rng(2);
        let f1 = Tensor::uniform([2, 4, 5, 5], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform([2, 4, 5, 5], -1.0, 1.0, &mut r);
        for (rad, step) in [(1, 1), (2, 1), (2, 2)] {
            let got = correlation_forward(&f1, &f2, rad, step).unwrap();
            let want = triple_loop(&f1, &f2, rad as isize, step as isize);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn sparse_agrees_with_dense_on_grid() {
        let mut r = rng(3);
        let f1 = Tensor::uniform([1, 3, 9, 8], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform([1, 3, 9, 8], -1.0, 1.0, &mut r);
        let spec = CostVolumeSpec {
            radius: 4,
            disp_step: 2,
            spatial_stride: 2,
        };
        let dense = correlation_forward(&f1, &f2, 4, 2).unwrap();
        let sparse = sparse_correlation_forward(&f1, &f2, &spec).unwrap();
        for d in 0..spec.channels() {
            for y in (0..9).step_by(2) {
                for x in (0..8).step_by(2) {
                    assert_eq!(sparse.at(0, d, y, x).to_bits(), dense.at(0, d, y, x).to_bits());
                }
            }
        }
        let stride1 = CostVolumeSpec { spatial_stride: 1, ..spec };
        assert_eq!(sparse_correlation_forward(&f1, &f2, &stride1).unwrap(), dense);
    }

    #[test]
    fn grid_fill_reproduces_linear_fields() {
        for (h, w, st) in [(8usize, 8usize, 2usize), (9, 7, 2), (10, 12, 3)] {
            let field = |y: usize, x: usize| 0.5 + 0.25 * y as f64 - 0.75 * x as f64;
            let grid = Tensor::from_fn([1, 1, h.div_ceil(st), w.div_ceil(st)], |_, _, gy, gx| field(gy * st, gx * st));
            let full = fill_from_grid(&grid, st, h, w).unwrap();
            for y in 0..h {
                for x in 0..w {
                    assert!((full.at(0, 0, y, x) - field(y, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetry_and_scale_covariance() {
        let mut r = rng(4);
        let f1 = Tensor::uniform([1, 3, 6, 6], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform([1, 3, 6, 6], -1.0, 1.0, &mut r);
        let spec = CostVolumeSpec::dense(2);
        let ab = correlation_forward(&f1, &f2, 2, 1).unwrap();
        let ba = correlation_forward(&f2, &f1, 2, 1).unwrap();
        let disps = spec.displacements();
        for (d, &(dy, dx)) in disps.iter().enumerate() {
            let opp = disps.iter().position(|&p| p == (-dy, -dx)).unwrap();
            for y in 0..6isize {
                for x in 0..6isize {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..6).contains(&yy) && (0..6).contains(&xx) {
                        let lhs = ab.at(0, d, y as usize, x as usize);
                        let rhs = ba.at(0, opp, yy as usize, xx as usize);
                        assert!((lhs - rhs).abs() < 1e-15);
                    }
                }
            }
        }
        let scaled = correlation_forward(&f1, &f2.map(|v| v * -2.5), 2, 1).unwrap();
        assert!(scaled.max_abs_diff(&ab.map(|v| v * -2.5)).unwrap() < 1e-14);
    }

    #[test]
    fn gradients_wrt_both_features() {
        let mut r = rng(5);
        let f1 = Tensor::uniform([1, 3, 6, 5], -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform([1, 3, 6, 5], -1.0, 1.0, &mut r);
        for spec in [CostVolumeSpec::dense(2), CostVolumeSpec { radius: 2, disp_step: 2, spatial_stride: 2 }] {
            let rep = finite_diff_check(&[f1.clone(), f2.clone()], &[true, true], 1e-5, |g, v| Ok(correlation(g, v[0], v[1], spec)?)).unwrap();
            assert!(rep.max_rel_err < 1e-6, "{spec:?}: {rep:?}");
        }
    }
}
