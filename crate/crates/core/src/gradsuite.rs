//! Named finite-difference checks of every differentiable building block,
//! plus a small two-level cascade assembled from the real level code.

use liteflow_tensor::{directional_check_params, finite_diff_check, GradCheckReport, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::costvolume::{correlation, CostVolumeSpec};
use crate::decoder::{bilinear_upconv_weight, DecoderLevel, LevelConfig, LevelFlows, MultiScaleFlows};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvSpec, ConvStack};
use crate::loss::{charbonnier, multiscale_loss, LossKind, LossSpec};
use crate::regularizer::{apply_flconv, build_filters, Regularizer};
use crate::warp::f_warp;

/// Pass threshold on the maximum relative error.
pub const THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

pub type CaseFn = fn(u64) -> Result<GradCheckReport>;

pub const CASES: &[(&str, CaseFn)] = &[
    ("conv2d", conv2d),
    ("conv_transpose2d", conv_transpose2d),
    ("leaky_relu", leaky_relu),
    ("f_warp_features", f_warp_features),
    ("f_warp_flow", f_warp_flow),
    ("correlation", correlation_dense),
    ("sparse_correlation", correlation_sparse),
    ("build_filters", build_filters_case),
    ("apply_flconv", apply_flconv_case),
    ("charbonnier", charbonnier_case),
    ("multiscale_loss", multiscale_loss_case),
    ("toy_model", toy_model),
];

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < THRESHOLD
    }
}

/// Runs the named case, or every case when `only` is `None`.
pub fn run(only: Option<&str>, seed: u64) -> Result<Vec<CaseResult>> {
    let selected: Vec<_> = CASES.iter().filter(|(n, _)| only.map_or(true, |o| o == *n)).collect();
    if selected.is_empty() {
        return Err(Error::Usage(format!("unknown gradient check `{}`; known: {}", only.unwrap_or(""), case_names().join(", "))));
    }
    selected.into_iter().map(|(name, f)| Ok(CaseResult { name, report: f(seed)? })).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, r)
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform([2, 3, 7, 6], -1.0, 1.0, &mut r);
    let w = uniform([4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform([1, 4, 1, 1], -1.0, 1.0, &mut r);
    let mut rep = finite_diff_check(&[x.clone(), w.clone(), b.clone()], &[true, true, true], EPS, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?;
    rep.merge(&finite_diff_check(&[x, w, b], &[true, true, true], EPS, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))?);
    Ok(rep)
}

fn conv_transpose2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform([1, 2, 4, 5], -1.0, 1.0, &mut r);
    let w = uniform([2, 3, 4, 4], -1.0, 1.0, &mut r);
    Ok(finite_diff_check(&[x, w], &[true, true], EPS, |g, v| g.conv_transpose2d(v[0], v[1], 2, 1))?)
}

fn leaky_relu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    // Keep every element clear of the kink at zero.
    let x = uniform([1, 2, 4, 4], 0.05, 1.0, &mut r);
    let signs = uniform([1, 2, 4, 4], -1.0, 1.0, &mut r);
    let x = x.zip_map(&signs, |a, s| a * s.signum())?;
    Ok(finite_diff_check(&[x], &[true], EPS, |g, v| Ok(g.leaky_relu(v[0], 0.1)))?)
}

fn warp_inputs(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let feat = uniform([1, 3, 6, 7], -1.0, 1.0, &mut r);
    let flow = uniform([1, 2, 6, 7], -2.5, 2.5, &mut r);
    (feat, flow)
}

fn f_warp_features(seed: u64) -> Result<GradCheckReport> {
    let (feat, flow) = warp_inputs(seed);
    Ok(finite_diff_check(&[feat, flow], &[true, false], EPS, |g, v| Ok(f_warp(g, v[0], v[1])?))?)
}

fn f_warp_flow(seed: u64) -> Result<GradCheckReport> {
    let (feat, flow) = warp_inputs(seed);
    Ok(finite_diff_check(&[feat, flow], &[false, true], EPS, |g, v| Ok(f_warp(g, v[0], v[1])?))?)
}

fn correlation_dense(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let f1 = uniform([1, 3, 6, 6], -1.0, 1.0, &mut r);
    let f2 = uniform([1, 3, 6, 6], -1.0, 1.0, &mut r);
    Ok(finite_diff_check(&[f1, f2], &[true, true], EPS, |g, v| Ok(correlation(g, v[0], v[1], CostVolumeSpec::dense(2))?))?)
}

fn correlation_sparse(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let f1 = uniform([1, 2, 8, 8], -1.0, 1.0, &mut r);
    let f2 = uniform([1, 2, 8, 8], -1.0, 1.0, &mut r);
    let spec = CostVolumeSpec {
        radius: 2,
        disp_step: 2,
        spatial_stride: 2,
    };
    Ok(finite_diff_check(&[f1, f2], &[true, true], EPS, |g, v| Ok(correlation(g, v[0], v[1], spec)?))?)
}

fn build_filters_case(seed: u64) -> Result<GradCheckReport> {
    let dist = uniform([1, 9, 4, 5], -1.5, 1.5, &mut rng(seed));
    Ok(finite_diff_check(&[dist], &[true], EPS, |g, v| build_filters(g, v[0]))?)
}

fn apply_flconv_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let flow = uniform([1, 2, 5, 6], -2.0, 2.0, &mut r);
    let raw = uniform([1, 9, 5, 6], 0.05, 1.0, &mut r);
    Ok(finite_diff_check(&[flow, raw], &[true, true], EPS, |g, v| Ok(apply_flconv(g, v[0], v[1])?))?)
}

fn charbonnier_case(seed: u64) -> Result<GradCheckReport> {
    let x = uniform([1, 2, 4, 4], -3.0, 3.0, &mut rng(seed));
    let LossKind::Charbonnier { eps2, q } = LossKind::CHARBONNIER else { unreachable!() };
    Ok(finite_diff_check(&[x], &[true], EPS, |g, v| Ok(charbonnier(g, v[0], eps2, q)))?)
}

/// The loss is smooth away from zero end-point error, and its per-element
/// gradients are small (means over every pixel), so a wider step wins.
pub const LOSS_EPS: f64 = 1e-4;

/// Unit weights keep every term's gradient well above finite-difference
/// noise; the default weights span three orders of magnitude.
fn unit_weights() -> LossSpec {
    LossSpec {
        level_weights: (2..=6).map(|k| (k, 1.0)).collect(),
        full_res_weight: 1.0,
        kind: LossKind::L2,
        gt_scale: 0.5,
    }
}

fn multiscale_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let f6 = uniform([1, 2, 2, 2], -1.0, 1.0, &mut r);
    let f5a = uniform([1, 2, 4, 4], -2.0, 2.0, &mut r);
    let f5b = uniform([1, 2, 4, 4], -2.0, 2.0, &mut r);
    let full = uniform([1, 2, 8, 8], -4.0, 4.0, &mut r);
    let gt = uniform([1, 2, 8, 8], -6.0, 6.0, &mut r);
    let mut rep = GradCheckReport::default();
    for kind in [LossKind::L2, LossKind::CHARBONNIER] {
        let spec = LossSpec { kind, ..unit_weights() };
        let gt = gt.clone();
        rep.merge(&finite_diff_check(
            &[f6.clone(), f5a.clone(), f5b.clone(), full.clone()],
            &[true, true, true, true],
            LOSS_EPS,
            move |g, v| {
                let flows = MultiScaleFlows {
                    levels: vec![
                        LevelFlows { level: 6, flows: vec![v[0]] },
                        LevelFlows {
                            level: 5,
                            flows: vec![v[1], v[2]],
                        },
                    ],
                    outputs: Vec::new(),
                    pseudo: None,
                    full_res: v[3],
                };
                Ok(multiscale_loss(g, &flows, &gt, &spec)?.total)
            },
        )?);
    }
    Ok(rep)
}

/// Two cascade levels at 4×4 and 8×8 built with the production level code
/// (warp, cost volume, M, S, R with occlusion and f-lconv, flow lifting) but
/// narrow stacks, trained against a random target through the multi-scale loss.
pub struct ToyModel {
    enc_fine: ConvLayer,
    enc_coarse: ConvLayer,
    levels: [DecoderLevel; 2],
}

fn toy_level(store: &mut ParamStore, level: usize, coarsest: bool) -> Result<DecoderLevel> {
    let feat = 4;
    let cv = CostVolumeSpec::dense(1);
    let prefix = format!("toy/level{level}");
    let upconv = if coarsest {
        None
    } else {
        Some(store.add(format!("{prefix}/M/upconv/weight"), bilinear_upconv_weight())?)
    };
    Ok(DecoderLevel {
        config: LevelConfig {
            level,
            cost_volume: cv,
            last_kernel: 3,
            omega: 3,
        },
        upconv,
        matching: ConvStack::chain(store, &format!("{prefix}/M"), &[cv.channels(), 4, 2], 3, 0.1)?,
        refinement: ConvStack::chain(store, &format!("{prefix}/S"), &[2 * feat + 2, 4, 2], 3, 0.1)?,
        regularizer: Regularizer {
            omega: 3,
            stack: ConvStack::chain(store, &format!("{prefix}/R"), &[feat + 3, 4, 9], 3, 0.1)?,
        },
    })
}

impl ToyModel {
    /// The layout plus its randomly initialized parameters.
    pub fn new(seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let conv = |ci, co, stride| ConvSpec {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride,
        };
        let enc_fine = ConvLayer::register(&mut store, "toy/enc/conv1", conv(3, 4, 1), Some(0.1))?;
        let enc_coarse = ConvLayer::register(&mut store, "toy/enc/conv2", conv(4, 4, 2), Some(0.1))?;
        let levels = [toy_level(&mut store, 6, true)?, toy_level(&mut store, 5, false)?];
        let mut r = rng(seed);
        let names: Vec<String> = store.sorted().map(|p| p.name.clone()).collect();
        for name in names {
            let id = store.id(&name)?;
            let p = store.get_mut(id);
            let noise = Tensor::uniform(p.value.shape(), -0.4, 0.4, &mut r);
            p.value.add_assign(&noise)?;
        }
        let model = ToyModel {
            enc_fine,
            enc_coarse,
            levels,
        };
        Ok((model, store))
    }

    /// Multi-scale loss of the cascade on 8×8 images against `gt`.
    pub fn loss(&self, g: &mut Graph, im1: &Tensor, im2: &Tensor, gt: &Tensor) -> Result<liteflow_tensor::Var> {
        let (i1, i2) = (g.input(im1.clone()), g.input(im2.clone()));
        let a1 = self.enc_fine.forward(g, i1)?;
        let a2 = self.enc_fine.forward(g, i2)?;
        let b1 = self.enc_coarse.forward(g, a1)?;
        let b2 = self.enc_coarse.forward(g, a2)?;
        let c1 = g.avg_pool2(i1)?;
        let c2 = g.avg_pool2(i2)?;
        let coarse = self.levels[0].forward(g, b1, b2, c1, c2, None, true)?;
        let fine = self.levels[1].forward(g, a1, a2, i1, i2, Some(coarse.flow()), true)?;
        let flows_of = |o: &crate::decoder::LevelOutput| {
            let mut v = vec![o.flow_m, o.flow_s];
            v.extend(o.reg.map(|r| r.flow));
            v
        };
        let flows = MultiScaleFlows {
            levels: vec![
                LevelFlows {
                    level: 6,
                    flows: flows_of(&coarse),
                },
                LevelFlows {
                    level: 5,
                    flows: flows_of(&fine),
                },
            ],
            full_res: fine.flow(),
            outputs: vec![coarse, fine],
            pseudo: None,
        };
        let spec = LossSpec {
            kind: LossKind::CHARBONNIER,
            ..unit_weights()
        };
        Ok(multiscale_loss(g, &flows, gt, &spec)?.total)
    }
}

pub fn toy_inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed ^ 0x746f_79);
    let im1 = uniform([1, 3, 8, 8], -0.5, 0.5, &mut r);
    let im2 = uniform([1, 3, 8, 8], -0.5, 0.5, &mut r);
    let gt = uniform([1, 2, 8, 8], -2.0, 2.0, &mut r);
    (im1, im2, gt)
}

/// Random directions per parameter tensor in the toy-model check.
pub const TOY_DIRECTIONS: usize = 8;

fn toy_model(seed: u64) -> Result<GradCheckReport> {
    let (model, mut store) = ToyModel::new(seed)?;
    let (im1, im2, gt) = toy_inputs(seed);
    Ok(directional_check_params(&mut store, TOY_DIRECTIONS, EPS, seed, |g| Ok(model.loss(g, &im1, &im2, &gt)?))?)
}
