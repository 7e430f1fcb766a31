//! NetE: cascaded flow inference (descriptor matching M, sub-pixel
//! refinement S) followed by regularization R at each pyramid level, coarse
//! to fine, with an optional truncated pseudo level 2.
//!
//! Flows are kept in pixels of their own level.

use liteflow_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::costvolume::{correlation, CostVolumeSpec};
use crate::encoder::{FeaturePyramid, PYRAMID_CHANNELS};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvSpec, ConvStack};
use crate::regularizer::{apply_flconv, build_filters, remove_mean, RegularizedFlow, Regularizer};
use crate::warp::f_warp;

/// Per-level hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub level: usize,
    pub cost_volume: CostVolumeSpec,
    /// Kernel of the last M, S and R convolutions.
    pub last_kernel: usize,
    /// f-lconv window side.
    pub omega: usize,
}

impl LevelConfig {
    pub fn encoder_channels(&self) -> usize {
        PYRAMID_CHANNELS[self.level - 1]
    }
}

/// Widths of the matching stack; the input is the cost volume.
pub fn matching_widths(cost_channels: usize) -> [usize; 7] {
    [cost_channels, 128, 128, 96, 64, 32, 2]
}

/// Widths of the refinement stack over `concat(F1, warped F2, flow)`.
pub fn refinement_widths(feat_ch: usize) -> [usize; 7] {
    [2 * feat_ch + 2, 128, 128, 96, 64, 32, 2]
}

/// One level of NetE.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub config: LevelConfig,
    /// 2→2 transposed 4×4 convolution lifting the coarser flow; absent at the coarsest level.
    pub upconv: Option<ParamId>,
    pub matching: ConvStack,
    pub refinement: ConvStack,
    pub regularizer: Regularizer,
}

/// Intermediate values of one level pass.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    /// Upsampled coarser flow, if any.
    pub upsampled: Option<Var>,
    pub cost_volume: Var,
    pub flow_m: Var,
    /// Input of the refinement stack.
    pub refinement_input: Var,
    pub flow_s: Var,
    /// Absent when the level is run without its regularizer.
    pub reg: Option<RegularizedFlow>,
    /// Output of the layer before the last matching convolution.
    pub matching_penultimate: Var,
}

impl LevelOutput {
    pub fn flow(&self) -> Var {
        self.reg.map_or(self.flow_s, |r| r.flow)
    }
}

pub fn level_prefix(level: usize) -> String {
    format!("nete/level{level}")
}

/// Doubles the extent of `flow` with a learnable transposed convolution.
/// The input is edge-padded by one pixel first so that a bilinear kernel
/// reproduces bilinear upsampling up to the borders.
pub fn upsample_flow2x(g: &mut Graph, flow: Var, weight: Var) -> Result<Var> {
    let padded = g.pad_replicate(flow, 1)?;
    Ok(g.conv_transpose2d(padded, weight, 2, 3)?)
}

/// `2 ×` the bilinear upsampling kernel on the channel diagonal, shaped
/// `[2, 2, 4, 4]`: at this value [`upsample_flow2x`] equals doubling the
/// flow and resizing it bilinearly to twice the extent.
pub fn bilinear_upconv_weight() -> Tensor {
    const TAPS: [f64; 4] = [0.25, 0.75, 0.75, 0.25];
    Tensor::from_fn([2, 2, 4, 4], |i, o, y, x| if i == o { 2.0 * TAPS[y] * TAPS[x] } else { 0.0 })
}

/// Fixed flow lift: bilinear resize to twice the extent and doubled magnitudes.
pub fn lift_flow_bilinear(g: &mut Graph, flow: Var) -> Result<Var> {
    let s = g.shape(flow);
    let up = g.resize_bilinear(flow, 2 * s.h, 2 * s.w)?;
    Ok(g.scale(up, 2.0))
}

impl DecoderLevel {
    pub fn register(store: &mut ParamStore, config: LevelConfig, coarsest: bool, slope: f64) -> Result<Self> {
        config.cost_volume.validate()?;
        let prefix = level_prefix(config.level);
        let feat = config.encoder_channels();
        let upconv = if coarsest {
            None
        } else {
            Some(store.add(format!("{prefix}/M/upconv/weight"), Tensor::zeros([2, 2, 4, 4]))?)
        };
        let matching = ConvStack::chain(store, &format!("{prefix}/M"), &matching_widths(config.cost_volume.channels()), config.last_kernel, slope)?;
        let refinement = ConvStack::chain(store, &format!("{prefix}/S"), &refinement_widths(feat), config.last_kernel, slope)?;
        let regularizer = Regularizer::register(store, &format!("{prefix}/R"), feat, config.omega, slope)?;
        Ok(DecoderLevel {
            config,
            upconv,
            matching,
            refinement,
            regularizer,
        })
    }

    /// Descriptor matching: cost volume on warped features, residual added to the lifted flow.
    fn matching_unit(&self, g: &mut Graph, f1: Var, f2: Var, upsampled: Option<Var>) -> Result<(Var, Var, Var)> {
        let warped = match upsampled {
            Some(up) => f_warp(g, f2, up)?,
            None => f2,
        };
        let cv = correlation(g, f1, warped, self.config.cost_volume)?;
        let outs = self.matching.forward_all(g, cv)?;
        let residual = outs[outs.len() - 1];
        let flow = match upsampled {
            Some(up) => g.add(up, residual)?,
            None => residual,
        };
        Ok((cv, flow, outs[outs.len() - 2]))
    }

    /// Sub-pixel refinement of `flow_m`.
    fn refinement_unit(&self, g: &mut Graph, f1: Var, f2: Var, flow_m: Var) -> Result<(Var, Var)> {
        let warped = f_warp(g, f2, flow_m)?;
        let input = g.concat_channels(&[f1, warped, flow_m])?;
        let residual = self.refinement.forward(g, input)?;
        Ok((input, g.add(flow_m, residual)?))
    }

    /// One level pass. `prev` is the final flow of the coarser level.
    pub fn forward(&self, g: &mut Graph, f1: Var, f2: Var, im1: Var, im2: Var, prev: Option<Var>, regularize: bool) -> Result<LevelOutput> {
        let upsampled = match (prev, self.upconv) {
            (Some(p), Some(w)) => {
                let w = g.param(w)?;
                Some(upsample_flow2x(g, p, w)?)
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::State(format!("level {} has no upconvolution for a coarser flow", self.config.level))),
            (None, Some(_)) => return Err(Error::State(format!("level {} expects a coarser flow", self.config.level))),
        };
        let (cost_volume, flow_m, matching_penultimate) = self.matching_unit(g, f1, f2, upsampled)?;
        let (refinement_input, flow_s) = self.refinement_unit(g, f1, f2, flow_m)?;
        let reg = if regularize {
            Some(self.regularizer.forward(g, f1, im1, im2, flow_s)?)
        } else {
            None
        };
        Ok(LevelOutput {
            upsampled,
            cost_volume,
            flow_m,
            refinement_input,
            flow_s,
            reg,
            matching_penultimate,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.matching.parameter_count() + self.refinement.parameter_count() + self.regularizer.stack.parameter_count() + self.upconv.map_or(0, |_| 64)
    }

    pub fn learnable_layers(&self) -> usize {
        self.matching.layers.len() + self.refinement.layers.len() + self.regularizer.stack.layers.len() + usize::from(self.upconv.is_some())
    }
}

/// Truncated level 2 built from upsampled level-3 activations.
#[derive(Clone, Debug)]
pub struct PseudoLevel {
    pub kernel: usize,
    pub omega: usize,
    pub inference: ConvLayer,
    pub regularization: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct PseudoOutput {
    pub flow_m: Var,
    pub filters: Var,
    pub flow: Var,
}

impl PseudoLevel {
    /// `matching_ch` and `reg_ch` are the widths of the level-3 activations fed forward.
    pub fn register(store: &mut ParamStore, matching_ch: usize, reg_ch: usize, kernel: usize, omega: usize) -> Result<Self> {
        let prefix = level_prefix(2);
        let inference = ConvLayer::register(store, format!("{prefix}/M/conv"), ConvSpec::new(matching_ch, 2, kernel, 1), None)?;
        let regularization = ConvLayer::register(store, format!("{prefix}/R/conv_dist"), ConvSpec::new(reg_ch, omega * omega, kernel, 1), None)?;
        Ok(PseudoLevel {
            kernel,
            omega,
            inference,
            regularization,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.inference.spec.parameter_count() + self.regularization.spec.parameter_count()
    }

    pub fn forward(&self, g: &mut Graph, level3: Option<&LevelOutput>) -> Result<PseudoOutput> {
        let missing = || Error::State("pseudo level 2 needs the regularized level-3 activations".into());
        let l3 = level3.ok_or_else(missing)?;
        let reg3 = l3.reg.ok_or_else(missing)?;
        let lift = |g: &mut Graph, v: Var| -> Result<Var> {
            let s = g.shape(v);
            Ok(g.resize_bilinear(v, 2 * s.h, 2 * s.w)?)
        };
        let up = lift_flow_bilinear(g, l3.flow())?;
        let m_feat = lift(g, l3.matching_penultimate)?;
        let residual = self.inference.forward(g, m_feat)?;
        let flow_m = g.add(up, residual)?;
        let r_feat = lift(g, reg3.penultimate)?;
        let dist = self.regularization.forward(g, r_feat)?;
        let filters = build_filters(g, dist)?;
        let (centred, mean) = remove_mean(g, flow_m)?;
        let smoothed = apply_flconv(g, centred, filters)?;
        let flow = g.add_channel_bias(smoothed, mean)?;
        Ok(PseudoOutput { flow_m, filters, flow })
    }
}

/// Every loss-bearing flow of one level, coarse to fine within the level.
#[derive(Clone, Debug)]
pub struct LevelFlows {
    pub level: usize,
    pub flows: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiScaleFlows {
    /// Coarsest first.
    pub levels: Vec<LevelFlows>,
    pub outputs: Vec<LevelOutput>,
    pub pseudo: Option<PseudoOutput>,
    /// Finest flow resized to the input extent, in input pixels.
    pub full_res: Var,
}

impl MultiScaleFlows {
    pub fn finest_level(&self) -> usize {
        self.levels.last().map_or(0, |l| l.level)
    }

    /// Final flow of level `k`.
    pub fn flow_at(&self, k: usize) -> Option<Var> {
        self.levels.iter().find(|l| l.level == k).and_then(|l| l.flows.last().copied())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Coarsest first.
    pub levels: Vec<DecoderLevel>,
    pub pseudo: Option<PseudoLevel>,
}

/// How much of the decoder a forward pass runs: levels down to `finest`,
/// with or without the regularizer of that finest level. Level 2 is the
/// pseudo level and always includes its regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope {
    pub finest: usize,
    pub regularize_finest: bool,
}

impl Scope {
    pub const fn through(finest: usize) -> Self {
        Scope {
            finest,
            regularize_finest: true,
        }
    }
}

impl Decoder {
    /// The scope covering every registered level.
    pub fn full_scope(&self) -> Scope {
        let finest = if self.pseudo.is_some() { 2 } else { self.levels.last().map_or(6, |l| l.config.level) };
        Scope::through(finest)
    }

    /// Runs NetE over `scope`. `images1[k - 1]` is the first image at level
    /// `k`; the finest flow is also resized to `full_extent`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        pyr1: &FeaturePyramid,
        pyr2: &FeaturePyramid,
        images1: &[Var],
        images2: &[Var],
        full_extent: (usize, usize),
        scope: Scope,
    ) -> Result<MultiScaleFlows> {
        let mut prev = None;
        let mut levels = Vec::new();
        let mut outputs = Vec::new();
        for lvl in self.levels.iter().filter(|l| l.config.level >= scope.finest) {
            let k = lvl.config.level;
            let regularize = k > scope.finest || scope.regularize_finest;
            let out = lvl.forward(g, pyr1.level(k), pyr2.level(k), images1[k - 1], images2[k - 1], prev, regularize)?;
            let mut flows = vec![out.flow_m, out.flow_s];
            if let Some(r) = out.reg {
                flows.push(r.flow);
            }
            levels.push(LevelFlows { level: k, flows });
            prev = Some(out.flow());
            outputs.push(out);
        }
        let pseudo = match &self.pseudo {
            Some(p) if scope.finest == 2 => {
                let l3 = self.levels.iter().zip(&outputs).find(|(l, _)| l.config.level == 3).map(|(_, o)| o);
                let out = p.forward(g, l3)?;
                levels.push(LevelFlows {
                    level: 2,
                    flows: vec![out.flow_m, out.flow],
                });
                Some(out)
            }
            _ => None,
        };
        let finest = levels.last().ok_or_else(|| Error::Config(format!("no decoder level at or above level {}", scope.finest)))?;
        if finest.level != scope.finest {
            return Err(Error::Config(format!("decoder cannot run down to level {}", scope.finest)));
        }
        let finest_flow = *finest.flows.last().expect("level without flows");
        let factor = (1usize << (finest.level - 1)) as f64;
        let resized = g.resize_bilinear(finest_flow, full_extent.0, full_extent.1)?;
        let full_res = g.scale(resized, factor);
        Ok(MultiScaleFlows {
            levels,
            outputs,
            pseudo,
            full_res,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.levels.iter().map(DecoderLevel::parameter_count).sum::<usize>() + self.pseudo.as_ref().map_or(0, PseudoLevel::parameter_count)
    }

    pub fn learnable_layers(&self) -> usize {
        self.levels.iter().map(DecoderLevel::learnable_layers).sum::<usize>() + if self.pseudo.is_some() { 2 } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_upconv_matches_resize() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let flow = Tensor::uniform([2, 2, 3, 5], -2.0, 2.0, &mut r);
        let mut g = Graph::without_params();
        let f = g.input(flow.clone());
        let w = g.input(bilinear_upconv_weight());
        let up = upsample_flow2x(&mut g, f, w).unwrap();
        let fixed = lift_flow_bilinear(&mut g, f).unwrap();
        assert_eq!(g.shape(up), [2, 2, 6, 10].into());
        assert!(g.value(up).max_abs_diff(g.value(fixed)).unwrap() < 1e-14);
    }

    #[test]
    fn constant_flow_doubles() {
        let mut g = Graph::without_params();
        let f = g.input(Tensor::full([1, 2, 4, 4], 1.0));
        let w = g.input(bilinear_upconv_weight());
        let up = upsample_flow2x(&mut g, f, w).unwrap();
        assert!(g.value(up).data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        let z = g.input(Tensor::zeros([1, 2, 4, 4]));
        let up = upsample_flow2x(&mut g, z, w).unwrap();
        assert_eq!(g.value(up).max_abs(), 0.0);
    }

    #[test]
    fn stack_widths() {
        assert_eq!(refinement_widths(128)[0], 258);
        assert_eq!(matching_widths(49), [49, 128, 128, 96, 64, 32, 2]);
    }
}
