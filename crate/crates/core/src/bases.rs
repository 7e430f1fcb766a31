//! Export of the flow bases learned by the last layer of an M or S unit.
//!
//! The last convolution maps `c` feature channels to the two flow
//! components, so its kernels are the bases the unit combines into flow.

use std::path::{Path, PathBuf};

use liteflow_tensor::Tensor;

use crate::error::{Error, Result};
use crate::flowio::write_gray;
use crate::model::LiteFlowNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Matching,
    Refinement,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Unit::Matching),
            "S" | "s" => Ok(Unit::Refinement),
            _ => Err(Error::Usage(format!("unknown unit `{s}`; expected M or S"))),
        }
    }
}

impl Unit {
    pub fn letter(self) -> char {
        match self {
            Unit::Matching => 'M',
            Unit::Refinement => 'S',
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowBases {
    pub level: usize,
    pub unit: Unit,
    /// `tiles[component][input_channel]`, each `1 × 1 × k × k` in `[0, 1]`.
    pub tiles: Vec<Vec<Tensor>>,
}

/// Min-max normalization; constant tiles become uniform mid-gray.
pub fn normalize_tile(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.5)
    }
}

pub fn flow_bases(model: &LiteFlowNet, unit: Unit, level: usize) -> Result<FlowBases> {
    let lvl = model
        .decoder
        .levels
        .iter()
        .find(|l| l.config.level == level)
        .ok_or_else(|| Error::Usage(format!("level {level} is not a decoder level of this model")))?;
    let stack = match unit {
        Unit::Matching => &lvl.matching,
        Unit::Refinement => &lvl.refinement,
    };
    let last = stack.layers.last().ok_or_else(|| Error::State("empty stack".into()))?;
    let w = &model.store.get(last.weight).value;
    let s = w.shape();
    let tiles = (0..s.n)
        .map(|o| {
            (0..s.c)
                .map(|i| normalize_tile(&Tensor::from_vec([1, 1, s.h, s.w], w.plane(o, i).to_vec()).expect("plane size")))
                .collect()
        })
        .collect();
    Ok(FlowBases { level, unit, tiles })
}

impl FlowBases {
    /// One row per flow component, one column per input channel; each tap
    /// becomes a `zoom × zoom` block with a one-pixel black gutter.
    pub fn grid(&self, zoom: usize) -> Tensor {
        let rows = self.tiles.len();
        let cols = self.tiles.first().map_or(0, Vec::len);
        let k = self.tiles.first().and_then(|r| r.first()).map_or(0, |t| t.shape().h);
        let cell = k * zoom + 1;
        let mut out = Tensor::zeros([1, 1, rows * cell + 1, cols * cell + 1]);
        for (r, row) in self.tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                for y in 0..k * zoom {
                    for x in 0..k * zoom {
                        out.set(0, 0, r * cell + 1 + y, c * cell + 1 + x, tile.at(0, 0, y / zoom, x / zoom));
                    }
                }
            }
        }
        out
    }
}

/// Writes the grid as `level{k}_{unit}_bases.png` in `out_dir` and returns the bases and path.
pub fn export_flow_bases(model: &LiteFlowNet, unit: Unit, level: usize, out_dir: &Path) -> Result<(FlowBases, PathBuf)> {
    let bases = flow_bases(model, unit, level)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(format!("level{level}_{}_bases.png", unit.letter()));
    write_gray(&path, &bases.grid(8))?;
    Ok((bases, path))
}
