//! Multi-scale training loss.

use std::collections::BTreeMap;

use liteflow_tensor::ops::resize_bilinear_forward;
use liteflow_tensor::{Graph, Operator, Result as TResult, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::MultiScaleFlows;
use crate::error::{Error, Result};

/// Per-pixel penalty applied to the end-point distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    L2,
    /// `(x² + eps2)^q`.
    Charbonnier { eps2: f64, q: f64 },
}

impl LossKind {
    pub const CHARBONNIER: LossKind = LossKind::Charbonnier { eps2: 0.01, q: 0.2 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Weight of every flow at level `k`, keyed by `k`.
    #[serde(with = "level_keys")]
    pub level_weights: BTreeMap<usize, f64>,
    /// Weight of the flow resized to the input extent.
    pub full_res_weight: f64,
    pub kind: LossKind,
    /// Ground truth and predictions are both multiplied by this before comparison.
    pub gt_scale: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            level_weights: [(6, 0.32), (5, 0.08), (4, 0.02), (3, 0.01), (2, 0.005)].into_iter().collect(),
            full_res_weight: 6.25e-4,
            kind: LossKind::L2,
            gt_scale: 1.0 / 20.0,
        }
    }
}

/// Level numbers as string keys, which every text format accepts.
mod level_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("level key `{k}` is not a number"))))
            .collect()
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.level_weights.values().any(|&w| !(w > 0.0)) || self.full_res_weight < 0.0 || !(self.gt_scale > 0.0) {
            return Err(Error::Config("loss weights and the ground-truth scale must be positive".into()));
        }
        if let LossKind::Charbonnier { eps2, q } = self.kind {
            if !(eps2 > 0.0 && q > 0.0) {
                return Err(Error::Config("Charbonnier needs eps2 > 0 and q > 0".into()));
            }
        }
        Ok(())
    }
}

/// `(x² + eps2)^q`, element-wise.
pub fn charbonnier_value(x: f64, eps2: f64, q: f64) -> f64 {
    (x * x + eps2).powf(q)
}

struct Charbonnier {
    eps2: f64,
    q: f64,
}

impl Operator for Charbonnier {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> TResult<Vec<Option<Tensor>>> {
        let (eps2, q) = (self.eps2, self.q);
        let d = inputs[0].zip_map(grad, |x, g| g * 2.0 * q * x * (x * x + eps2).powf(q - 1.0))?;
        Ok(vec![Some(d)])
    }
}

pub fn charbonnier(g: &mut Graph, x: Var, eps2: f64, q: f64) -> Var {
    let out = g.value(x).map(|v| charbonnier_value(v, eps2, q));
    g.record(Charbonnier { eps2, q }, &[x], out)
}

/// Ground truth in pixels of an `h × w` level: bilinear resize, magnitudes
/// divided by the extent ratio.
pub fn downsample_flow(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = gt.shape();
    let ratio = s.h as f64 / h as f64;
    if (s.w as f64 / w as f64 - ratio).abs() > 1e-12 {
        return Err(Error::dim("downsample_flow", format!("{s} cannot be scaled uniformly to {h}×{w}")));
    }
    let mut out = resize_bilinear_forward(gt, h, w)?;
    out.scale_assign(1.0 / ratio);
    Ok(out)
}

/// Mean penalty of the end-point distance between `pred · scale` and `target`.
fn flow_term(g: &mut Graph, pred: Var, target: Var, kind: LossKind, scale: f64) -> Result<Var> {
    let scaled = g.scale(pred, scale);
    let diff = g.sub(scaled, target)?;
    let epe = g.channel_norm(diff);
    let pen = match kind {
        LossKind::L2 => epe,
        LossKind::Charbonnier { eps2, q } => charbonnier(g, epe, eps2, q),
    };
    Ok(g.mean_all(pen))
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// Unweighted per-flow terms summed per level; key 1 is the full-resolution term.
    pub per_level: BTreeMap<usize, f64>,
}

/// Weighted sum over every flow of `flows` against full-resolution `gt`
/// (`n × 2 × H × W`, input pixels).
pub fn multiscale_loss(g: &mut Graph, flows: &MultiScaleFlows, gt: &Tensor, spec: &LossSpec) -> Result<LossOutput> {
    let full = g.shape(flows.full_res);
    if gt.shape() != full {
        return Err(Error::dim("multiscale_loss", format!("ground truth {} vs prediction {full}", gt.shape())));
    }
    let mut terms = Vec::new();
    let mut per_level = BTreeMap::new();
    for lf in &flows.levels {
        let w = *spec
            .level_weights
            .get(&lf.level)
            .ok_or_else(|| Error::Config(format!("no loss weight for level {}", lf.level)))?;
        let s = g.shape(lf.flows[0]);
        let mut target = downsample_flow(gt, s.h, s.w)?;
        target.scale_assign(spec.gt_scale);
        let target = g.input(target);
        for &f in &lf.flows {
            let t = flow_term(g, f, target, spec.kind, spec.gt_scale)?;
            *per_level.entry(lf.level).or_insert(0.0) += g.value(t).data()[0];
            terms.push(g.scale(t, w));
        }
    }
    if spec.full_res_weight > 0.0 {
        let target = g.input(gt.map(|v| v * spec.gt_scale));
        let t = flow_term(g, flows.full_res, target, spec.kind, spec.gt_scale)?;
        per_level.insert(1, g.value(t).data()[0]);
        terms.push(g.scale(t, spec.full_res_weight));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossOutput { total, per_level })
}
