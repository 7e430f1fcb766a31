//! Flow regularization: occlusion cue, feature-driven distance metric and
//! position-specific convex averaging of the flow (f-lconv).
//!
//! Filter taps are ordered row-major over the `ω × ω` window, so tap
//! `k = (dy + r)·ω + (dx + r)` with `r = ω / 2` addresses the neighbour at
//! `(y + dy, x + dx)`.

use liteflow_tensor::{Graph, Operator, ParamStore, Result as TResult, Shape, Tensor, TensorError, Var};

use crate::error::Result;
use crate::layers::ConvStack;
use crate::warp::image_warp;

/// `‖image_warp(im2, flow) − im1‖₂` over the colour channels.
pub fn occlusion_map(g: &mut Graph, im1: Var, im2: Var, flow: Var) -> Result<Var> {
    let warped = image_warp(g, im2, flow)?;
    let diff = g.sub(warped, im1)?;
    Ok(g.channel_norm(diff))
}

/// Subtracts the per-channel spatial mean; returns `(centred, mean)`.
pub fn remove_mean(g: &mut Graph, flow: Var) -> Result<(Var, Var)> {
    let mean = g.spatial_mean(flow);
    let neg = g.scale(mean, -1.0);
    Ok((g.add_channel_bias(flow, neg)?, mean))
}

/// Whether tap `k` of an `side × side` window centred at `(y, x)` lies inside an `h × w` map.
pub fn tap_in_bounds(k: usize, side: usize, y: usize, x: usize, h: usize, w: usize) -> bool {
    let r = side / 2;
    let (yy, xx) = ((y + k / side) as isize - r as isize, (x + k % side) as isize - r as isize);
    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w
}

/// `softmax(−D²)` over the channel column at every position, restricted to
/// the taps whose neighbour lies inside the map; taps outside get weight 0.
/// Equal to the full softmax followed by border renormalisation, but the
/// largest in-bounds weight is always 1, so the mass cannot underflow.
pub fn build_filters_forward(dist: &Tensor) -> TResult<Tensor> {
    let s = dist.shape();
    let side = window_side(s)?;
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let mut col = vec![0.0; s.c];
    for n in 0..s.n {
        let src = dist.item(n);
        let dst = out.item_mut(n);
        for p in 0..plane {
            let (y, x) = (p / s.w, p % s.w);
            let mut hi = f64::NEG_INFINITY;
            for (k, z) in col.iter_mut().enumerate() {
                if tap_in_bounds(k, side, y, x, s.h, s.w) {
                    let d = src[k * plane + p];
                    *z = -d * d;
                    hi = hi.max(*z);
                } else {
                    *z = f64::NEG_INFINITY;
                }
            }
            let mut total = 0.0;
            for z in col.iter_mut() {
                *z = (*z - hi).exp();
                total += *z;
            }
            for (k, z) in col.iter().enumerate() {
                dst[k * plane + p] = z / total;
            }
        }
    }
    Ok(out)
}

struct BuildFilters;

impl Operator for BuildFilters {
    fn name(&self) -> &'static str {
        "build_filters"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> TResult<Vec<Option<Tensor>>> {
        let dist = inputs[0];
        let s = dist.shape();
        let plane = s.plane();
        let mut gd = Tensor::zeros(s);
        for n in 0..s.n {
            let (gv, ov, dv) = (grad.item(n), out.item(n), dist.item(n));
            let gdn = gd.item_mut(n);
            for p in 0..plane {
                let inner: f64 = (0..s.c).map(|k| ov[k * plane + p] * gv[k * plane + p]).sum();
                for k in 0..s.c {
                    let i = k * plane + p;
                    let dz = ov[i] * (gv[i] - inner);
                    gdn[i] = dz * -2.0 * dv[i];
                }
            }
        }
        Ok(vec![Some(gd)])
    }
}

/// Turns a distance metric `n × ω² × h × w` into a filter bank of the same shape.
pub fn build_filters(g: &mut Graph, dist: Var) -> TResult<Var> {
    let out = build_filters_forward(g.value(dist))?;
    Ok(g.record(BuildFilters, &[dist], out))
}

fn window_side(filters: Shape) -> TResult<usize> {
    let side = (filters.c as f64).sqrt().round() as usize;
    if side * side != filters.c || side % 2 == 0 {
        return Err(TensorError::dim(
            "f_lconv",
            format!("filter bank {filters} does not hold an odd square window"),
        ));
    }
    Ok(side)
}

fn check_flconv(flow: &Tensor, filters: &Tensor) -> TResult<usize> {
    let (fs, gs) = (flow.shape(), filters.shape());
    if fs.n != gs.n || !fs.same_spatial(&gs) {
        return Err(TensorError::dim(
            "f_lconv",
            format!("flow {fs} and filter bank {gs} differ in extents"),
        ));
    }
    window_side(gs)
}

/// Column buffers of one batch item: for tap `k` and position `p`,
/// `cols[k·hw + p]` is the neighbour value and `mask[k·hw + p]` whether it
/// lies inside the map.
fn unfold(plane: &[f64], h: usize, w: usize, side: usize, cols: &mut [f64], mask: Option<&mut [f64]>) {
    let r = (side / 2) as isize;
    let hw = h * w;
    let mut mask = mask;
    for k in 0..side * side {
        let dy = (k / side) as isize - r;
        let dx = (k % side) as isize - r;
        for y in 0..h {
            let yy = y as isize + dy;
            for x in 0..w {
                let xx = x as isize + dx;
                let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                let i = k * hw + y * w + x;
                cols[i] = if inside { plane[yy as usize * w + xx as usize] } else { 0.0 };
                if let Some(m) = mask.as_deref_mut() {
                    m[i] = if inside { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

/// Adds column gradients back onto the positions they were read from.
fn fold(cols: &[f64], h: usize, w: usize, side: usize, plane: &mut [f64]) {
    let r = (side / 2) as isize;
    let hw = h * w;
    for k in 0..side * side {
        let dy = (k / side) as isize - r;
        let dx = (k % side) as isize - r;
        for y in 0..h {
            let yy = y as isize + dy;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            for x in 0..w {
                let xx = x as isize + dx;
                if xx >= 0 && (xx as usize) < w {
                    plane[yy as usize * w + xx as usize] += cols[k * hw + y * w + x];
                }
            }
        }
    }
}

/// Packed f-lconv: every flow channel is unfolded into `ω²` columns, weighted
/// by the filter column at each position and renormalised by the filter mass
/// that falls inside the map.
pub fn flconv_forward(flow: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let side = check_flconv(flow, filters)?;
    let s = flow.shape();
    let hw = s.plane();
    let taps = side * side;
    let mut out = Tensor::zeros(s);
    let mut cols = vec![0.0; taps * hw];
    let mut mask = vec![0.0; taps * hw];
    for n in 0..s.n {
        let gcol = filters.item(n);
        for c in 0..s.c {
            unfold(flow.plane(n, c), s.h, s.w, side, &mut cols, Some(&mut mask));
            let dst = out.plane_mut(n, c);
            for p in 0..hw {
                let (mut num, mut mass) = (0.0, 0.0);
                for k in 0..taps {
                    let i = k * hw + p;
                    num += gcol[i] * cols[i];
                    mass += gcol[i] * mask[i];
                }
                dst[p] = num / mass;
            }
        }
    }
    Ok(out)
}

struct FlConv;

impl Operator for FlConv {
    fn name(&self) -> &'static str {
        "f_lconv"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> TResult<Vec<Option<Tensor>>> {
        let (flow, filters) = (inputs[0], inputs[1]);
        let side = window_side(filters.shape())?;
        let s = flow.shape();
        let hw = s.plane();
        let taps = side * side;
        let mut gflow = needs[0].then(|| Tensor::zeros(s));
        let mut gfilt = needs[1].then(|| Tensor::zeros(filters.shape()));
        let mut cols = vec![0.0; taps * hw];
        let mut mask = vec![0.0; taps * hw];
        let mut gcols = vec![0.0; taps * hw];
        for n in 0..s.n {
            let gcol = filters.item(n);
            for c in 0..s.c {
                unfold(flow.plane(n, c), s.h, s.w, side, &mut cols, Some(&mut mask));
                let (go, ov) = (grad.plane(n, c), out.plane(n, c));
                let mass: Vec<f64> = (0..hw).map(|p| (0..taps).map(|k| gcol[k * hw + p] * mask[k * hw + p]).sum()).collect();
                if let Some(gf) = gfilt.as_mut() {
                    let gfn = gf.item_mut(n);
                    for k in 0..taps {
                        for p in 0..hw {
                            let i = k * hw + p;
                            gfn[i] += go[p] * mask[i] * (cols[i] - ov[p]) / mass[p];
                        }
                    }
                }
                if let Some(gu) = gflow.as_mut() {
                    for k in 0..taps {
                        for p in 0..hw {
                            let i = k * hw + p;
                            gcols[i] = go[p] * gcol[i] / mass[p];
                        }
                    }
                    fold(&gcols, s.h, s.w, side, gu.plane_mut(n, c));
                }
            }
        }
        Ok(vec![gflow, gfilt])
    }
}

/// Regularizes `flow` (`n × 2 × h × w`) with per-position filters
/// (`n × ω² × h × w`); both channels share the filters.
pub fn apply_flconv(g: &mut Graph, flow: Var, filters: Var) -> Result<Var> {
    let out = flconv_forward(g.value(flow), g.value(filters))?;
    Ok(g.record(FlConv, &[flow, filters], out))
}

/// The regularization module R of one level.
#[derive(Clone, Debug)]
pub struct Regularizer {
    /// Filter window side ω.
    pub omega: usize,
    /// Distance-metric stack ending in `ω²` channels.
    pub stack: ConvStack,
}

/// Every intermediate of a regularization pass.
#[derive(Clone, Copy, Debug)]
pub struct RegularizedFlow {
    pub flow: Var,
    /// `concat(F1, mean-free flow, occlusion)`.
    pub input: Var,
    pub occlusion: Var,
    pub dist: Var,
    pub filters: Var,
    /// Output of the layer before the distance layer.
    pub penultimate: Var,
}

impl Regularizer {
    /// Widths `(c + 3) → 128 → 128 → 64 → 64 → 32 → 32 → ω²`.
    pub fn register(store: &mut ParamStore, prefix: &str, feat_ch: usize, omega: usize, slope: f64) -> Result<Self> {
        let widths = [feat_ch + 3, 128, 128, 64, 64, 32, 32, omega * omega];
        let stack = ConvStack::chain(store, prefix, &widths, omega, slope)?;
        Ok(Regularizer { omega, stack })
    }

    pub fn concat_width(&self) -> usize {
        self.stack.in_channels()
    }

    pub fn forward(&self, g: &mut Graph, feat1: Var, im1: Var, im2: Var, flow: Var) -> Result<RegularizedFlow> {
        let (centred, mean) = remove_mean(g, flow)?;
        let occlusion = occlusion_map(g, im1, im2, flow)?;
        let input = g.concat_channels(&[feat1, centred, occlusion])?;
        let outs = self.stack.forward_all(g, input)?;
        let dist = outs[outs.len() - 1];
        let penultimate = outs[outs.len() - 2];
        let filters = build_filters(g, dist)?;
        let smoothed = apply_flconv(g, centred, filters)?;
        let flow = g.add_channel_bias(smoothed, mean)?;
        Ok(RegularizedFlow {
            flow,
            input,
            occlusion,
            dist,
            filters,
            penultimate,
        })
    }
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

    /// Direct weighted neighbourhood sum with border renormalisation.
    fn flconv_loop(flow: &Tensor, filters: &Tensor) -> Tensor {
        let s = flow.shape();
        let side = (filters.shape().c as f64).sqrt() as usize;
        let r = (side / 2) as isize;
        Tensor::from_fn(s, |n, c, y, x| {
            let (mut num, mut mass) = (0.0, 0.0);
            for j in -r..=r {
                for i in -r..=r {
                    let (yy, xx) = (y as isize + j, x as isize + i);
                    if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
                        continue;
                    }
                    let k = ((j + r) as usize) * side + (i + r) as usize;
                    let gk = filters.at(n, k, y, x);
                    num += gk * flow.at(n, c, yy as usize, xx as usize);
                    mass += gk;
                }
            }
            num / mass
        })
    }

    fn random_filters(n: usize, side: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
        build_filters_forward(&Tensor::uniform([n, side * side, h, w], -2.0, 2.0, r)).unwrap()
    }

    #[test]
    fn occlusion_is_colour_distance() {
        let im1 = Tensor::zeros([1, 3, 2, 2]);
        let im2 = Tensor::from_fn([1, 3, 2, 2], |_, c, _, _| [3.0, 4.0, 0.0][c]);
        let mut g = Graph::without_params();
        let (a, b) = (g.input(im1.clone()), g.input(im2));
        let f = g.input(Tensor::zeros([1, 2, 2, 2]));
        let o = occlusion_map(&mut g, a, b, f).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 5.0));
        let same = g.input(im1);
        let o = occlusion_map(&mut g, a, same, f).unwrap();
        assert_eq!(g.value(o).max_abs(), 0.0);
    }

    #[test]
    fn uniform_column_gives_uniform_weights() {
        let (h, w) = (4, 5);
        let d = Tensor::full([1, 9, h, w], 0.7);
        let gb = build_filters_forward(&d).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = (0..9).filter(|&k| tap_in_bounds(k, 3, y, x, h, w)).count();
                for k in 0..9 {
                    let want = if tap_in_bounds(k, 3, y, x, h, w) { 1.0 / inside as f64 } else { 0.0 };
                    assert!((gb.at(0, k, y, x) - want).abs() < 1e-15);
                }
            }
        }
        assert!((gb.at(0, 0, 1, 1) - 1.0 / 9.0).abs() < 1e-15);
        assert!((gb.at(0, 4, 0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn centred_zero_distance_dominates() {
        let d = Tensor::from_fn([1, 9, 3, 3], |_, k, _, _| if k == 4 { 0.0 } else { 10.0 });
        let gb = build_filters_forward(&d).unwrap();
        assert!(gb.at(0, 4, 1, 1) >= 1.0 - 8.0 * (-100.0f64).exp());
    }

    #[test]
    fn filters_match_softmax_formula() {
        let d = Tensor::uniform([2, 25, 3, 4], -3.0, 3.0, &mut rng(1));
        let gb = build_filters_forward(&d).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let inside = |k: usize| tap_in_bounds(k, 5, y, x, 3, 4);
                    let z: f64 = (0..25).filter(|&k| inside(k)).map(|k| (-d.at(n, k, y, x).powi(2)).exp()).sum();
                    for k in 0..25 {
                        let want = if inside(k) { (-d.at(n, k, y, x).powi(2)).exp() / z } else { 0.0 };
                        assert!((gb.at(n, k, y, x) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_softmax_equals_renormalised_full_softmax() {
        let mut r = rng(4);
        let d = Tensor::uniform([1, 9, 4, 4], -2.0, 2.0, &mut r);
        let flow = Tensor::uniform([1, 2, 4, 4], -3.0, 3.0, &mut r);
        let full = Tensor::from_fn(d.shape(), |n, k, y, x| {
            let z: f64 = (0..9).map(|j| (-d.at(n, j, y, x).powi(2)).exp()).sum();
            (-d.at(n, k, y, x).powi(2)).exp() / z
        });
        let a = flconv_forward(&flow, &build_filters_forward(&d).unwrap()).unwrap();
        assert!(a.max_abs_diff(&flconv_loop(&flow, &full)).unwrap() < 1e-12);
    }

    #[test]
    fn large_distances_stay_finite_at_borders() {
        // Only an out-of-bounds tap has a small distance; a full softmax would
        // underflow every in-bounds weight at the corner.
        let d = Tensor::from_fn([1, 9, 3, 3], |_, k, _, _| if k == 0 { 0.0 } else { 40.0 + k as f64 });
        let gb = build_filters_forward(&d).unwrap();
        let flow = Tensor::full([1, 2, 3, 3], 1.5);
        let out = flconv_forward(&flow, &gb).unwrap();
        assert!(out.all_finite());
        assert!((out.at(0, 0, 0, 0) - 1.5).abs() < 1e-12);
        let mut g = Graph::without_params();
        let (dv, fv) = (g.input_with_grad(d), g.input_with_grad(flow));
        let filt = build_filters(&mut g, dv).unwrap();
        let o = apply_flconv(&mut g, fv, filt).unwrap();
        let s = g.sum_all(o);
        let grads = g.backward_scalar(s).unwrap();
        assert!(grads.leaf(dv).unwrap().all_finite() && grads.leaf(fv).unwrap().all_finite());
    }

    #[test]
    fn uniform_filters_keep_constant_flow() {
        let flow = Tensor::from_fn([1, 2, 5, 6], |_, c, _, _| if c == 0 { 1.5 } else { -0.25 });
        let gb = Tensor::full([1, 9, 5, 6], 1.0 / 9.0);
        let out = flconv_forward(&flow, &gb).unwrap();
        assert!(out.max_abs_diff(&flow).unwrap() < 1e-15);
    }

    #[test]
    fn delta_filters_are_identity() {
        let flow = Tensor::uniform([2, 2, 5, 5], -3.0, 3.0, &mut rng(2));
        let gb = Tensor::from_fn([2, 25, 5, 5], |_, k, _, _| if k == 12 { 1.0 } else { 0.0 });
        assert_eq!(flconv_forward(&flow, &gb).unwrap(), flow);
    }

    #[test]
    fn packed_matches_loop() {
        let mut r = rng(3);
        for side in [3, 5, 7] {
            let flow = Tensor::uniform([2, 2, 9, 11], -4.0, 4.0, &mut r);
            let gb = random_filters(2, side, 9, 11, &mut r);
            let diff = flconv_forward(&flow, &gb).unwrap().max_abs_diff(&flconv_loop(&flow, &gb)).unwrap();
            assert!(diff < 1e-12, "ω = {side}: {diff}");
        }
    }

    #[test]
    fn rejects_bad_banks() {
        let flow = Tensor::zeros([1, 2, 4, 4]);
        assert!(flconv_forward(&flow, &Tensor::zeros([1, 8, 4, 4])).is_err());
        assert!(flconv_forward(&flow, &Tensor::zeros([1, 16, 4, 4])).is_err());
        assert!(flconv_forward(&flow, &Tensor::zeros([1, 9, 4, 5])).is_err());
    }

    #[test]
    fn build_filters_gradient() {
        let d = Tensor::uniform([1, 9, 3, 3], -1.5, 1.5, &mut rng(4));
        let rep = finite_diff_check(&[d], &[true], 1e-5, |g, v| build_filters(g, v[0])).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn flconv_gradient_wrt_flow_and_filters() {
        let mut r = rng(5);
        let flow = Tensor::uniform([1, 2, 5, 6], -2.0, 2.0, &mut r);
        // Unnormalised positive banks exercise the renormalisation terms too.
        let gb = Tensor::uniform([1, 9, 5, 6], 0.1, 1.0, &mut r);
        let rep = finite_diff_check(&[flow, gb], &[true, true], 1e-6, |g, v| Ok(apply_flconv(g, v[0], v[1])?)).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}
