//! Stage-wise and conventional training on synthetic pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use liteflow_tensor::{Graph, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch, render_scene, sample_seed, SyntheticConfig, SyntheticSample};
use crate::decoder::Scope;
use crate::encoder::{normalize_image, PixelRange};
use crate::error::{Error, Result};
use crate::loss::{multiscale_loss, LossSpec};
use crate::metrics::aee;
use crate::model::{LiteFlowNet, ModelConfig};
use crate::optim::{Adam, AdamConfig};

/// One block of iterations over a fixed part of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub scope: Scope,
    pub iterations: usize,
    /// `(from, to)`: copy level `from` weights into level `to` when the stage starts.
    pub init_from: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

/// Scopes of the stage-wise protocol: NetC with M6:S6, then R6, then each
/// finer level's M:S together with its R.
pub fn stagewise_scopes(cfg: &ModelConfig) -> Vec<(String, Scope, Option<(usize, usize)>)> {
    let mut out = vec![
        (
            "M6:S6".to_string(),
            Scope {
                finest: 6,
                regularize_finest: false,
            },
            None,
        ),
        ("R6".to_string(), Scope::through(6), None),
    ];
    for k in (cfg.finest_regular_level()..6).rev() {
        out.push((format!("M{k}:S{k}+R{k}"), Scope::through(k), Some((k + 1, k))));
    }
    if cfg.pseudo_level2.is_some() {
        out.push(("pseudo2".to_string(), Scope::through(2), None));
    }
    out
}

impl StageSchedule {
    /// One stage per entry of [`stagewise_scopes`]; `iterations` must match in length.
    pub fn stagewise(cfg: &ModelConfig, iterations: &[usize]) -> Result<Self> {
        let scopes = stagewise_scopes(cfg);
        if scopes.len() != iterations.len() {
            return Err(Error::Config(format!(
                "stage-wise schedule of this model has {} stages, {} iteration counts given",
                scopes.len(),
                iterations.len()
            )));
        }
        let stages = scopes
            .into_iter()
            .zip(iterations)
            .map(|((name, scope, init_from), &iterations)| Stage {
                name,
                scope,
                iterations,
                init_from,
            })
            .collect();
        Ok(StageSchedule { stages })
    }

    /// The whole network for `iterations` steps.
    pub fn conventional(cfg: &ModelConfig, iterations: usize) -> Self {
        StageSchedule {
            stages: vec![Stage {
                name: "all".into(),
                scope: Scope::through(cfg.finest_level()),
                iterations,
                init_from: None,
            }],
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// Whether parameter `name` takes part in a pass over `scope`.
pub fn in_scope(name: &str, scope: Scope) -> bool {
    if name.starts_with("netc/") {
        return true;
    }
    let Some(rest) = name.strip_prefix("nete/level") else {
        return false;
    };
    let Some((level, unit)) = rest.split_once('/') else {
        return false;
    };
    let Ok(level) = level.parse::<usize>() else {
        return false;
    };
    if level > scope.finest {
        true
    } else if level == scope.finest {
        level == 2 || scope.regularize_finest || !unit.starts_with("R/")
    } else {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Stagewise,
    Conventional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    /// Per-stage iterations for stage-wise mode, or a single total.
    pub iterations: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global iterations at which the learning rate is multiplied by `lr_factor`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "half")]
    pub lr_factor: f64,
}

fn half() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Square crop taken from each rendered scene.
    pub crop: usize,
    #[serde(default = "yes")]
    pub flip: bool,
    /// Standard deviation of additive uniform noise on both images; 0 disables it.
    #[serde(default)]
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticConfig::default(),
            crop: 64,
            flip: true,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.synthetic.validate()?;
        if self.data.crop == 0 || self.data.crop % 32 != 0 || self.data.crop > self.data.synthetic.extent {
            return Err(Error::Config(format!("crop {} must be a multiple of 32 within the rendered extent", self.data.crop)));
        }
        if self.schedule.batch_size == 0 || !(self.schedule.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        self.stage_schedule().map(|_| ())
    }

    pub fn stage_schedule(&self) -> Result<StageSchedule> {
        match self.schedule.mode {
            ScheduleMode::Stagewise => StageSchedule::stagewise(&self.model, &self.schedule.iterations),
            ScheduleMode::Conventional => match self.schedule.iterations.as_slice() {
                [n] => Ok(StageSchedule::conventional(&self.model, *n)),
                _ => Err(Error::Config("conventional training takes a single iteration count".into())),
            },
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let passed = self.schedule.lr_milestones.iter().filter(|&&m| iteration >= m).count();
        self.schedule.learning_rate * self.schedule.lr_factor.powi(passed as i32)
    }
}

/// Infinite deterministic stream of augmented synthetic samples.
pub struct SyntheticStream {
    cfg: DataConfig,
    seed: u64,
    index: u64,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn new(cfg: DataConfig, seed: u64) -> Self {
        SyntheticStream {
            cfg,
            seed,
            index: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6175_676d),
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<SyntheticSample>> {
        (0..n)
            .map(|_| {
                let scene = render_scene(sample_seed(self.seed, self.index), &self.cfg.synthetic)?;
                self.index += 1;
                let mut s = augment(&scene, self.cfg.crop, self.cfg.flip, &mut self.rng)?;
                if self.cfg.noise_std > 0.0 {
                    let a = self.cfg.noise_std * 3f64.sqrt();
                    for t in [&mut s.image1, &mut s.image2] {
                        t.data_mut().iter_mut().for_each(|v| *v += self.rng.gen_range(-a..=a));
                    }
                }
                Ok(s)
            })
            .collect()
    }
}

/// Mean-free network inputs and ground truth of a batch.
pub fn prepare_batch(samples: &[SyntheticSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let (i1, i2, flow) = batch(samples)?;
    Ok((normalize_image(&i1, PixelRange::Unit)?.image, normalize_image(&i2, PixelRange::Unit)?.image, flow))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    /// Unweighted per-level terms; key 1 is the full-resolution term.
    pub per_level: BTreeMap<usize, f64>,
}

pub const CSV_HEADER: &str = "iteration,stage,lr,loss,level6,level5,level4,level3,level2,full";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        let cell = |k: usize| self.per_level.get(&k).map_or(String::new(), |v| format!("{v:.8e}"));
        format!(
            "{},{},{:e},{:.8e},{},{},{},{},{},{}",
            self.iteration,
            self.stage,
            self.lr,
            self.loss,
            cell(6),
            cell(5),
            cell(4),
            cell(3),
            cell(2),
            cell(1)
        )
    }
}

/// One optimization step over `samples`; returns the loss before the update.
pub fn train_step(model: &mut LiteFlowNet, adam: &mut Adam, samples: &[SyntheticSample], loss: &LossSpec, scope: Scope, lr: f64) -> Result<(f64, BTreeMap<usize, f64>)> {
    let (i1, i2, gt) = prepare_batch(samples)?;
    model.store.zero_grad();
    let (value, per_level, grads) = {
        let mut g = Graph::new(&model.store);
        let flows = model.forward(&mut g, &i1, &i2, scope)?;
        let out = multiscale_loss(&mut g, &flows, &gt, loss)?;
        let value = g.value(out.total).data()[0];
        (value, out.per_level, g.backward_scalar(out.total)?)
    };
    model.store.accumulate(&grads)?;
    adam.step(&mut model.store, lr)?;
    Ok((value, per_level))
}

/// Runs `schedule` on `model`. Parameters outside each stage's scope are
/// frozen; stages that introduce a level first copy the coarser level's
/// weights wherever shapes agree. Records go to `log` as CSV if given.
pub fn run_stagewise(
    model: &mut LiteFlowNet,
    schedule: &StageSchedule,
    cfg: &TrainConfig,
    stream: &mut SyntheticStream,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LogRecord>> {
    let mut adam = Adam::new(cfg.adam.clone());
    let mut records = Vec::with_capacity(schedule.total_iterations());
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io("loss log", e))?;
    }
    let mut iteration = 0;
    for stage in &schedule.stages {
        if let Some((from, to)) = stage.init_from {
            let copied = model.copy_level(from, to);
            info!("stage {}: initialized {} tensors from level {from}", stage.name, copied.len());
        }
        let scope = stage.scope;
        model.store.set_trainable(|name| in_scope(name, scope));
        for _ in 0..stage.iterations {
            let lr = cfg.learning_rate(iteration);
            let samples = stream.next_batch(cfg.schedule.batch_size)?;
            let (loss, per_level) = train_step(model, &mut adam, &samples, &cfg.loss, scope, lr)?;
            let rec = LogRecord {
                iteration,
                stage: stage.name.clone(),
                lr,
                loss,
                per_level,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io("loss log", e))?;
            }
            records.push(rec);
            iteration += 1;
        }
    }
    model.store.set_trainable(|_| true);
    Ok(records)
}

/// Loss of `model` over `samples` (evaluated in chunks of `batch_size`), averaged per sample.
pub fn evaluate_loss(model: &LiteFlowNet, samples: &[SyntheticSample], loss: &LossSpec, scope: Scope, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (i1, i2, gt) = prepare_batch(chunk)?;
        let mut g = Graph::new(&model.store);
        let flows = model.forward(&mut g, &i1, &i2, scope)?;
        let out = multiscale_loss(&mut g, &flows, &gt, loss)?;
        total += g.value(out.total).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean full-resolution end-point error of `model` over `samples`.
pub fn evaluate_aee(model: &LiteFlowNet, samples: &[SyntheticSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (i1, i2, gt) = prepare_batch(chunk)?;
        let mut g = Graph::new(&model.store);
        let flows = model.forward(&mut g, &i1, &i2, model.full_scope())?;
        let est = g.value(flows.full_res);
        for n in 0..chunk.len() {
            total += aee(&est.batch_item(n), &gt.batch_item(n), None)?;
        }
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_layout() {
        let cfg = ModelConfig::liteflownet2();
        let names: Vec<String> = stagewise_scopes(&cfg).into_iter().map(|s| s.0).collect();
        assert_eq!(names, ["M6:S6", "R6", "M5:S5+R5", "M4:S4+R4", "M3:S3+R3", "pseudo2"]);
        assert!(StageSchedule::stagewise(&cfg, &[1, 2]).is_err());
    }

    #[test]
    fn scope_membership() {
        let first = Scope {
            finest: 6,
            regularize_finest: false,
        };
        assert!(in_scope("netc/conv1/weight", first));
        assert!(in_scope("nete/level6/M/conv1/weight", first));
        assert!(!in_scope("nete/level6/R/conv1/weight", first));
        assert!(in_scope("nete/level6/R/conv1/weight", Scope::through(6)));
        assert!(!in_scope("nete/level5/M/upconv/weight", Scope::through(6)));
        assert!(in_scope("nete/level3/R/conv7/bias", Scope::through(2)));
        assert!(in_scope("nete/level2/R/conv_dist/weight", Scope::through(2)));
    }

    #[test]
    fn learning_rate_ladder() {
        let text = r#"
            seed = 1
            [model]
            levels = []
            [schedule]
            mode = "conventional"
            iterations = [10]
            batch_size = 1
            learning_rate = 1e-4
            lr_milestones = [4, 8]
        "#;
        assert!(TrainConfig::from_toml_str(text).is_err());
        let mut cfg: TrainConfig = toml::from_str(text).unwrap();
        cfg.model = ModelConfig::reduced(5);
        cfg.validate().unwrap();
        assert_eq!(cfg.learning_rate(3), 1e-4);
        assert_eq!(cfg.learning_rate(4), 5e-5);
        assert_eq!(cfg.learning_rate(9), 2.5e-5);
    }
}
