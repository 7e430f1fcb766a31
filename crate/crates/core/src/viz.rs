//! Middlebury color-wheel rendering of flow fields.

use std::f64::consts::PI;

use liteflow_tensor::Tensor;

use crate::error::{Error, Result};

const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 wheel colors in `[0, 1]`: red, yellow, green, cyan, blue, magenta.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(SEGMENTS.iter().sum());
    let ramps: [(usize, usize, bool); 6] = [(0, 1, true), (1, 0, false), (1, 2, true), (2, 1, false), (2, 0, true), (0, 2, false)];
    for (&len, &(fixed, moving, rising)) in SEGMENTS.iter().zip(&ramps) {
        for i in 0..len {
            let t = i as f64 / len as f64;
            let mut c = [0.0; 3];
            c[fixed] = 1.0;
            c[moving] = if rising { t } else { 1.0 - t };
            wheel.push(c);
        }
    }
    wheel
}

/// Fractional wheel index of direction `(u, v)`, in `[0, ncols − 1]`.
pub fn wheel_position(u: f64, v: f64, ncols: usize) -> f64 {
    let a = (-v).atan2(-u) / PI;
    (a + 1.0) / 2.0 * (ncols - 1) as f64
}

/// Color of one vector already divided by the normalizing magnitude.
pub fn vector_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [f64; 3] {
    let ncols = wheel.len();
    let rad = u.hypot(v);
    let fk = wheel_position(u, v, ncols);
    let k0 = fk.floor() as usize;
    let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    std::array::from_fn(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        }
    })
}

/// 99th-percentile (nearest-rank) vector magnitude.
pub fn auto_max_magnitude(flow: &Tensor) -> f64 {
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    let mut mags: Vec<f64> = u.iter().zip(v).map(|(a, b)| a.hypot(*b)).filter(|m| m.is_finite()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// `1 × 3 × H × W` rendering in `[0, 1]`. Saturation is magnitude over
/// `max_mag`, or over the 99th-percentile magnitude when absent. Zero flow is white.
pub fn flow_to_color(flow: &Tensor, max_mag: Option<f64>) -> Result<Tensor> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 {
        return Err(Error::dim("flow_to_color", format!("expected 1×2×H×W, got {s}")));
    }
    let m = max_mag.unwrap_or_else(|| auto_max_magnitude(flow));
    let m = if m > 0.0 { m } else { 1.0 };
    let wheel = color_wheel();
    let mut out = Tensor::zeros([1, 3, s.h, s.w]);
    for i in 0..s.h * s.w {
        let (u, v) = (flow.plane(0, 0)[i], flow.plane(0, 1)[i]);
        let col = if u.is_finite() && v.is_finite() { vector_color(u / m, v / m, &wheel) } else { [0.0; 3] };
        for (c, val) in col.into_iter().enumerate() {
            out.plane_mut(0, c)[i] = val;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [1.0, 0.0, 0.0]);
        assert_eq!(w[15], [1.0, 1.0, 0.0]);
        assert_eq!(w[21], [0.0, 1.0, 0.0]);
        assert_eq!(w[25], [0.0, 1.0, 1.0]);
        assert_eq!(w[36], [0.0, 0.0, 1.0]);
        assert_eq!(w[49], [1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let c = flow_to_color(&Tensor::zeros([1, 2, 3, 3]), None).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn percentile_ignores_one_outlier() {
        let mut f = Tensor::full([1, 2, 10, 20], 0.0);
        f.plane_mut(0, 0).fill(1.0);
        f.plane_mut(0, 0)[0] = 1000.0;
        assert_eq!(auto_max_magnitude(&f), 1.0);
    }
}
