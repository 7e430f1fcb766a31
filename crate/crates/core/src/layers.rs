//! Named convolution layers backed by a [`ParamStore`].

use liteflow_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// Shape of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch + self.out_ch
    }
}

/// A registered convolution with optional leaky-ReLU activation.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
    /// Leaky slope, or `None` for a linear layer.
    pub activation: Option<f64>,
}

impl ConvLayer {
    /// Registers zero-valued `{name}/weight` and `{name}/bias`.
    pub fn register(store: &mut ParamStore, name: impl Into<String>, spec: ConvSpec, activation: Option<f64>) -> Result<Self> {
        let name = name.into();
        let weight = store.add(
            format!("{name}/weight"),
            Tensor::zeros([spec.out_ch, spec.in_ch, spec.kernel, spec.kernel]),
        )?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros([1, spec.out_ch, 1, 1]))?;
        Ok(ConvLayer {
            name,
            spec,
            weight,
            bias,
            activation,
        })
    }

    /// "Same" zero padding; output extents are `ceil(extent / stride)` for odd kernels.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.conv2d(x, w, Some(b), self.spec.stride, self.spec.kernel / 2)?;
        Ok(match self.activation {
            Some(slope) => g.leaky_relu(y, slope),
            None => y,
        })
    }
}

/// A chain of convolutions applied in order.
#[derive(Clone, Debug, Default)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    /// Registers `{prefix}/conv{i}` for consecutive widths in `widths`, all
    /// 3×3 stride 1 with leaky activation except the last, which uses
    /// `last_kernel` and stays linear.
    pub fn chain(store: &mut ParamStore, prefix: &str, widths: &[usize], last_kernel: usize, slope: f64) -> Result<Self> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                let spec = ConvSpec::new(widths[i], widths[i + 1], if last { last_kernel } else { 3 }, 1);
                ConvLayer::register(store, format!("{prefix}/conv{}", i + 1), spec, (!last).then_some(slope))
            })
            .collect::<Result<_>>()?;
        Ok(ConvStack { layers })
    }

    /// Output of every layer, in order.
    pub fn forward_all(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward(g, cur)?;
            outs.push(cur);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(*self.forward_all(g, x)?.last().expect("empty conv stack"))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.parameter_count()).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].spec.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_ch)
    }
}
