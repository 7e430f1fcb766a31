//! The assembled network: NetC, NetE and their shared parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use liteflow_tensor::{Graph, ParamStore, Tensor, Var};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costvolume::CostVolumeSpec;
use crate::decoder::{bilinear_upconv_weight, Decoder, DecoderLevel, MultiScaleFlows, PseudoLevel, Scope};
use crate::encoder::{normalize_image, padded_extent, Encoder, PixelRange};
use crate::error::{Error, Result};

fn default_slope() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    pub kernel: usize,
    pub omega: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Decoder levels, coarsest (6) first, consecutive.
    pub levels: Vec<crate::decoder::LevelConfig>,
    /// Truncated level 2; requires level 3 to be the finest regular level.
    #[serde(default)]
    pub pseudo_level2: Option<PseudoConfig>,
}

impl ModelConfig {
    /// Levels 6→3 plus pseudo level 2, sparse cost volume at level 3.
    pub fn liteflownet2() -> Self {
        let mut cfg = Self::reduced(3);
        cfg.pseudo_level2 = Some(PseudoConfig { kernel: 7, omega: 7 });
        cfg
    }

    /// Levels 6 down to `finest` (≥ 3) with the default per-level settings and no pseudo level.
    pub fn reduced(finest: usize) -> Self {
        let levels = (finest.max(3)..=6)
            .rev()
            .map(|level| {
                let cost_volume = if level == 3 {
                    CostVolumeSpec {
                        radius: 6,
                        disp_step: 2,
                        spatial_stride: 2,
                    }
                } else {
                    CostVolumeSpec::dense(3)
                };
                let k = if level >= 5 { 3 } else { 5 };
                crate::decoder::LevelConfig {
                    level,
                    cost_volume,
                    last_kernel: k,
                    omega: k,
                }
            })
            .collect();
        ModelConfig {
            leaky_slope: default_slope(),
            levels,
            pseudo_level2: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("at least one decoder level is required".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.level != 6 - i {
                return Err(Error::Config(format!("levels must run 6, 5, … consecutively; entry {i} is level {}", l.level)));
            }
            if l.level < 3 {
                return Err(Error::Config("regular levels stop at 3; use pseudo_level2 for level 2".into()));
            }
            if l.last_kernel % 2 == 0 || l.omega % 2 == 0 {
                return Err(Error::Config(format!("level {}: kernels must be odd", l.level)));
            }
            l.cost_volume.validate()?;
        }
        if let Some(p) = &self.pseudo_level2 {
            if self.finest_regular_level() != 3 {
                return Err(Error::Config("pseudo level 2 requires level 3".into()));
            }
            if p.kernel % 2 == 0 || p.omega % 2 == 0 {
                return Err(Error::Config("pseudo level kernels must be odd".into()));
            }
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn finest_regular_level(&self) -> usize {
        self.levels.last().map_or(6, |l| l.level)
    }

    pub fn finest_level(&self) -> usize {
        if self.pseudo_level2.is_some() {
            2
        } else {
            self.finest_regular_level()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Parameter totals of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub learnable_layers: usize,
    /// Element counts keyed by `netc` or `nete/level{k}`.
    pub breakdown: BTreeMap<String, usize>,
}

#[derive(Debug)]
pub struct LiteFlowNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl LiteFlowNet {
    /// Registers every parameter with zero values.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let slope = config.leaky_slope;
        let encoder = Encoder::register(&mut store, slope)?;
        let levels = config
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| DecoderLevel::register(&mut store, l.clone(), i == 0, slope))
            .collect::<Result<Vec<_>>>()?;
        let pseudo = match &config.pseudo_level2 {
            Some(p) => {
                let l3 = levels.last().expect("validated");
                let m_ch = l3.matching.layers[l3.matching.layers.len() - 2].spec.out_ch;
                let r_ch = l3.regularizer.stack.layers[l3.regularizer.stack.layers.len() - 2].spec.out_ch;
                Some(PseudoLevel::register(&mut store, m_ch, r_ch, p.kernel, p.omega)?)
            }
            None => None,
        };
        Ok(LiteFlowNet {
            config,
            store,
            encoder,
            decoder: Decoder { levels, pseudo },
        })
    }

    /// Registers and randomly initializes.
    pub fn initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.random_init(seed);
        Ok(m)
    }

    /// Uniform fan-in scaled weights (He bound for the leaky slope), zero
    /// biases and bilinear upconvolutions. Layers producing a flow residual
    /// or a distance metric are scaled down by 10 so the untrained network
    /// starts close to the lifted coarse flow. Deterministic per seed.
    pub fn random_init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + self.config.leaky_slope.powi(2));
        let names: Vec<(String, bool)> = self.store.sorted().map(|p| (p.name.clone(), self.is_head(&p.name))).collect();
        for (name, head) in names {
            let id = self.store.id(&name).expect("listed");
            let p = self.store.get_mut(id);
            let s = p.value.shape();
            p.value = if name.ends_with("/bias") {
                Tensor::zeros(s)
            } else if name.ends_with("upconv/weight") {
                bilinear_upconv_weight()
            } else {
                let fan_in = (s.c * s.h * s.w) as f64;
                let bound = (3.0 * gain / fan_in).sqrt() * if head { 0.1 } else { 1.0 };
                Tensor::uniform(s, -bound, bound, &mut rng)
            };
        }
    }

    /// Whether `name` is the weight of a last layer in M, S or R.
    fn is_head(&self, name: &str) -> bool {
        let lasts = self.decoder.levels.iter().flat_map(|l| {
            [&l.matching, &l.refinement, &l.regularizer.stack].into_iter().map(|s| s.layers.last().expect("non-empty").name.clone())
        });
        let pseudo = self.decoder.pseudo.iter().flat_map(|p| [p.inference.name.clone(), p.regularization.name.clone()]);
        lasts.chain(pseudo).any(|n| name == format!("{n}/weight"))
    }

    pub fn parameter_report(&self) -> ParamReport {
        let mut breakdown = BTreeMap::new();
        for (_, p) in self.store.iter() {
            let key: String = p.name.split('/').take(if p.name.starts_with("netc") { 1 } else { 2 }).collect::<Vec<_>>().join("/");
            *breakdown.entry(key).or_insert(0) += p.value.numel();
        }
        ParamReport {
            total: self.store.total_elements(),
            learnable_layers: self.encoder.layers.len() + self.decoder.learnable_layers(),
            breakdown,
        }
    }

    pub fn full_scope(&self) -> Scope {
        self.decoder.full_scope()
    }

    /// Forward pass over normalized images `n × 3 × H × W` with `H`, `W`
    /// multiples of 32.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, image1: &Tensor, image2: &Tensor, scope: Scope) -> Result<MultiScaleFlows> {
        if image1.shape() != image2.shape() {
            return Err(Error::dim("forward", format!("image shapes differ: {} vs {}", image1.shape(), image2.shape())));
        }
        let s = image1.shape();
        let im1 = g.input(image1.clone());
        let im2 = g.input(image2.clone());
        let (pyr1, pyr2) = self.encoder.forward(g, im1, im2)?;
        let coarsest_needed = 6;
        let pyramid = |g: &mut Graph<'p>, im: Var| -> Result<Vec<Var>> {
            let mut out = vec![im];
            for _ in 1..coarsest_needed {
                let last = *out.last().expect("non-empty");
                out.push(g.avg_pool2(last)?);
            }
            Ok(out)
        };
        let ims1 = pyramid(g, im1)?;
        let ims2 = pyramid(g, im2)?;
        self.decoder.forward(g, &pyr1, &pyr2, &ims1, &ims2, (s.h, s.w), scope)
    }

    /// Full-resolution flow for raw images of any extent.
    pub fn infer(&self, raw1: &Tensor, raw2: &Tensor, range: PixelRange) -> Result<Tensor> {
        let s = raw1.shape();
        if raw2.shape() != s {
            return Err(Error::dim("infer", format!("image shapes differ: {s} vs {}", raw2.shape())));
        }
        let (ph, pw) = (padded_extent(s.h), padded_extent(s.w));
        let n1 = normalize_image(raw1, range)?.image.pad_to(ph, pw)?;
        let n2 = normalize_image(raw2, range)?.image.pad_to(ph, pw)?;
        let mut g = Graph::new(&self.store);
        let flows = self.forward(&mut g, &n1, &n2, self.full_scope())?;
        Ok(g.value(flows.full_res).crop(s.h, s.w)?)
    }

    /// Copies level `from` weights into level `to` wherever the parameter
    /// shapes agree; mismatching tensors keep their current values and are
    /// reported. Returns the names copied.
    pub fn copy_level(&mut self, from: usize, to: usize) -> Vec<String> {
        let src_prefix = format!("nete/level{from}/");
        let dst_prefix = format!("nete/level{to}/");
        let pairs: Vec<(String, String)> = self
            .store
            .sorted()
            .filter_map(|p| p.name.strip_prefix(&dst_prefix).map(|rest| (format!("{src_prefix}{rest}"), p.name.clone())))
            .collect();
        let mut copied = Vec::new();
        for (src, dst) in pairs {
            let Ok(src_p) = self.store.by_name(&src) else {
                warn!("{dst}: no counterpart at level {from}; keeping fresh initialization");
                continue;
            };
            let value = src_p.value.clone();
            let id = self.store.id(&dst).expect("listed");
            if value.shape() == self.store.get(id).value.shape() {
                self.store.get_mut(id).value = value;
                copied.push(dst);
            } else {
                warn!("{dst}: shape {} differs from {src} {}; keeping fresh initialization", self.store.get(id).value.shape(), value.shape());
            }
        }
        copied
    }
}
