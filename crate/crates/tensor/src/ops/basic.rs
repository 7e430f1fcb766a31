//! Element-wise, channel and reduction operators.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Operator, Var};
use crate::tensor::{Shape, Tensor};

struct LeakyRelu {
    slope: f64,
}

impl Operator for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let gx = inputs[0].zip_map(grad, |x, g| if x >= 0.0 { g } else { self.slope * g })?;
        Ok(vec![Some(gx)])
    }
}

struct Add;

impl Operator for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

struct Sub;

impl Operator for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|g| -g))])
    }
}

struct Mul;

impl Operator for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let ga = if needs[0] { Some(grad.zip_map(inputs[1], |g, b| g * b)?) } else { None };
        let gb = if needs[1] { Some(grad.zip_map(inputs[0], |g, a| g * a)?) } else { None };
        Ok(vec![ga, gb])
    }
}

struct Scale {
    factor: f64,
}

impl Operator for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.factor))])
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl Operator for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            out.push(if need { Some(grad.narrow_channels(start, c)?) } else { None });
            start += c;
        }
        Ok(out)
    }
}

struct SumAll {
    scale: f64,
}

impl Operator for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0] * self.scale))])
    }
}

struct ChannelNorm;

impl Operator for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let s = x.shape();
        let mut gx = Tensor::zeros(s);
        for n in 0..s.n {
            let norm = out.plane(n, 0);
            let g = grad.plane(n, 0);
            for c in 0..s.c {
                let xp = x.plane(n, c);
                let gp = gx.plane_mut(n, c);
                for i in 0..s.plane() {
                    // Subgradient 0 at the origin.
                    if norm[i] > 0.0 {
                        gp[i] = g[i] * xp[i] / norm[i];
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct SpatialMean;

impl Operator for SpatialMean {
    fn name(&self) -> &'static str {
        "spatial_mean"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let inv = 1.0 / s.plane() as f64;
        Ok(vec![Some(Tensor::from_fn(s, |n, c, _, _| grad.at(n, c, 0, 0) * inv))])
    }
}

struct AddChannelBias;

impl Operator for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let gb = needs[1].then(|| {
            let s = inputs[1].shape();
            Tensor::from_fn(s, |n, c, _, _| grad.plane(n, c).iter().sum())
        });
        Ok(vec![needs[0].then(|| grad.clone()), gb])
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

impl Graph<'_> {
    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.record(LeakyRelu { slope }, &[x], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(Add, &[a, b], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(Sub, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(Mul, &[a, b], out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(Scale { factor }, &[x], out)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .map(|v| self.shape(*v))
            .ok_or_else(|| TensorError::dim("concat_channels", "no inputs"))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            if !s.same_spatial(&first) {
                return Err(TensorError::dim(
                    "concat_channels",
                    format!("{s} does not share batch/spatial extents with {first}"),
                ));
            }
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let shape = first.with_c(total);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for v in inputs {
                data.extend_from_slice(self.value(*v).item(n));
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.record(Concat { channels }, inputs, out))
    }

    /// Sum of all elements as a `1×1×1×1` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(SumAll { scale: 1.0 }, &[x], out)
    }

    /// Mean of all elements as a `1×1×1×1` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let scale = 1.0 / t.numel() as f64;
        let out = Tensor::scalar(t.sum() * scale);
        self.record(SumAll { scale }, &[x], out)
    }

    /// Euclidean norm over channels, giving one channel.
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let out = Tensor::from_fn(s.with_c(1), |n, _, y, xx| {
            (0..s.c).map(|c| t.at(n, c, y, xx).powi(2)).sum::<f64>().sqrt()
        });
        self.record(ChannelNorm, &[x], out)
    }

    /// Per-item, per-channel spatial mean with shape `n × c × 1 × 1`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let inv = 1.0 / s.plane() as f64;
        let out = Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| t.plane(n, c).iter().sum::<f64>() * inv);
        self.record(SpatialMean, &[x], out)
    }

    /// Adds an `n × c × 1 × 1` bias to every position of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        same_shape("add_channel_bias", Shape::new(xs.n, xs.c, 1, 1), bs)?;
        let b = self.value(bias);
        let out = Tensor::from_fn(xs, |n, c, y, xx| self.value(x).at(n, c, y, xx) + b.at(n, c, 0, 0));
        Ok(self.record(AddChannelBias, &[x, bias], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::without_params();
        let x = g.input(Tensor::from_vec([1, 1, 1, 3], vec![2.0, -2.0, 0.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[2.0, -0.2, 0.0]);
    }

    #[test]
    fn leaky_relu_gradient_away_from_kink() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let r = finite_diff_check(&[x], &[true], 1e-5, |g, v| Ok(g.leaky_relu(v[0], 0.1))).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn concat_widths_and_split() {
        let mut g = Graph::without_params();
        let a = g.input_with_grad(Tensor::full([1, 128, 2, 2], 1.0));
        let b = g.input_with_grad(Tensor::full([1, 128, 2, 2], 2.0));
        let f = g.input_with_grad(Tensor::full([1, 2, 2, 2], 3.0));
        let c = g.concat_channels(&[a, b, f]).unwrap();
        assert_eq!(g.shape(c).c, 258);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seed = Tensor::uniform(g.shape(c), -1.0, 1.0, &mut rng);
        let grads = g.backward(c, seed.clone()).unwrap();
        let parts: f64 = [a, b, f].iter().map(|v| grads.leaf(*v).unwrap().norm().powi(2)).sum();
        assert!((parts - seed.norm().powi(2)).abs() < 1e-9);
    }

    #[test]
    fn concat_single_is_identity_and_rejects_mismatch() {
        let mut g = Graph::without_params();
        let t = Tensor::from_fn([2, 3, 2, 2], |n, c, y, x| (n + c + y + x) as f64);
        let a = g.input(t.clone());
        let c = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(c), &t);
        let b = g.input(Tensor::zeros([2, 3, 3, 2]));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn reductions_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([2, 3, 1, 1], -1.0, 1.0, &mut rng);
        for (name, r) in [
            ("norm", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| Ok(g.channel_norm(v[0])))),
            ("mean", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| Ok(g.spatial_mean(v[0])))),
            (
                "bias",
                finite_diff_check(&[x.clone(), b], &[true, true], 1e-6, |g, v| g.add_channel_bias(v[0], v[1])),
            ),
            (
                "mul",
                finite_diff_check(&[x.clone(), x.map(|v| v * 0.5 + 0.1)], &[true, true], 1e-6, |g, v| g.mul(v[0], v[1])),
            ),
            ("sum", finite_diff_check(&[x.clone()], &[true], 1e-6, |g, v| Ok(g.mean_all(v[0])))),
        ] {
            let r = r.unwrap();
            assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param(id).unwrap();
                let x = g.input(Tensor::scalar(2.0));
                let y = g.mul(w, x).unwrap();
                g.backward_scalar(y).unwrap()
            };
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.get(id).grad.data(), &[4.0]);
    }
}
