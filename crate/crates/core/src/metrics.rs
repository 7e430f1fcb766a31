//! End-point error and outlier rates.

use liteflow_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outlier thresholds: 3 px absolute and 5% of the ground-truth magnitude.
pub const FL_ABS: f64 = 3.0;
pub const FL_REL: f64 = 0.05;

fn check(est: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    let (e, g) = (est.shape(), gt.shape());
    if e != g || e.c != 2 {
        return Err(Error::dim("metrics", format!("estimate {e} vs ground truth {g}")));
    }
    if let Some(m) = mask {
        let s = m.shape();
        if s.n != e.n || s.c != 1 || !s.same_spatial(&e) {
            return Err(Error::dim("metrics", format!("mask {s} does not match flow {e}")));
        }
    }
    Ok(())
}

/// Calls `f(epe, |gt|)` for every pixel whose mask value is nonzero.
fn for_each_pixel(est: &Tensor, gt: &Tensor, mask: Option<&Tensor>, mut f: impl FnMut(f64, f64)) -> Result<usize> {
    check(est, gt, mask)?;
    let s = est.shape();
    let mut count = 0;
    for n in 0..s.n {
        let (eu, ev) = (est.plane(n, 0), est.plane(n, 1));
        let (gu, gv) = (gt.plane(n, 0), gt.plane(n, 1));
        let m = mask.map(|m| m.plane(n, 0));
        for i in 0..s.h * s.w {
            if m.is_some_and(|m| m[i] == 0.0) {
                continue;
            }
            let epe = (eu[i] - gu[i]).hypot(ev[i] - gv[i]);
            f(epe, gu[i].hypot(gv[i]));
            count += 1;
        }
    }
    Ok(count)
}

fn undefined(what: &str) -> Error {
    Error::UndefinedMetric(format!("{what} over an empty mask"))
}

/// Mean end-point error over masked pixels.
pub fn aee(est: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    let mut sum = 0.0;
    let count = for_each_pixel(est, gt, mask, |e, _| sum += e)?;
    if count == 0 {
        return Err(undefined("AEE"));
    }
    Ok(sum / count as f64)
}

pub fn is_fl_outlier(epe: f64, gt_mag: f64) -> bool {
    epe >= FL_ABS && epe >= FL_REL * gt_mag
}

/// Percentage of masked pixels that are outliers under both thresholds.
pub fn fl_all(est: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    let mut bad = 0usize;
    let count = for_each_pixel(est, gt, mask, |e, m| bad += is_fl_outlier(e, m) as usize)?;
    if count == 0 {
        return Err(undefined("Fl-all"));
    }
    Ok(100.0 * bad as f64 / count as f64)
}

/// Percentage of non-occluded pixels with end-point error above 3 px.
pub fn out_noc(est: &Tensor, gt: &Tensor, noc: &Tensor) -> Result<f64> {
    let mut bad = 0usize;
    let count = for_each_pixel(est, gt, Some(noc), |e, _| bad += (e > FL_ABS) as usize)?;
    if count == 0 {
        return Err(undefined("Out-Noc"));
    }
    Ok(100.0 * bad as f64 / count as f64)
}

/// Field names are part of the JSON interface and stay fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aee: f64,
    pub fl_all: f64,
    pub out_noc: Option<f64>,
    pub pixels: usize,
    pub noc_pixels: Option<usize>,
}

impl EvalReport {
    /// `valid` restricts every metric; `noc` additionally restricts Out-Noc.
    pub fn compute(est: &Tensor, gt: &Tensor, valid: Option<&Tensor>, noc: Option<&Tensor>) -> Result<Self> {
        let pixels = for_each_pixel(est, gt, valid, |_, _| {})?;
        let noc = match (noc, valid) {
            (Some(n), Some(v)) => Some(n.zip_map(v, |a, b| if a != 0.0 && b != 0.0 { 1.0 } else { 0.0 })?),
            (Some(n), None) => Some(n.clone()),
            (None, _) => None,
        };
        let (out_noc, noc_pixels) = match &noc {
            Some(n) => (Some(out_noc(est, gt, n)?), Some(for_each_pixel(est, gt, Some(n), |_, _| {})?)),
            None => (None, None),
        };
        Ok(EvalReport {
            aee: aee(est, gt, valid)?,
            fl_all: fl_all(est, gt, valid)?,
            out_noc,
            pixels,
            noc_pixels,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("AEE      {:.4} px\nFl-all   {:.4} %\npixels   {}\n", self.aee, self.fl_all, self.pixels);
        if let (Some(o), Some(n)) = (self.out_noc, self.noc_pixels) {
            s.push_str(&format!("Out-Noc  {o:.4} %\nnoc px   {n}\n"));
        }
        s
    }
}
