//! Procedural image pairs with exact ground-truth flow.
//!
//! A scene is a textured background plus a few textured convex polygons,
//! painted back to front. Every layer moves by its own rigid translation.
//! Textures are continuous functions of position, so the second frame is
//! rendered exactly by evaluating each layer at `x − t`.

use std::f64::consts::TAU;

use liteflow_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EXTENT_MULTIPLE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub extent: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bound on each translation component, in pixels.
    pub max_displacement: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            extent: 64,
            min_objects: 1,
            max_objects: 3,
            max_displacement: 8.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.extent % EXTENT_MULTIPLE != 0 {
            return Err(Error::Config(format!("synthetic extent {} is not a multiple of {EXTENT_MULTIPLE}", self.extent)));
        }
        if self.min_objects > self.max_objects || !(self.max_displacement >= 0.0) {
            return Err(Error::Config("invalid object count range or displacement bound".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `1 × 3 × H × W`, unit range.
    pub image1: Tensor,
    pub image2: Tensor,
    /// `1 × 2 × H × W`, full-resolution pixels.
    pub flow: Tensor,
    /// `1 × 1 × H × W`: 1 where `x + u` lies inside the frame.
    pub valid: Tensor,
    /// `1 × 1 × H × W`: valid and still visible in the second frame.
    pub noc: Tensor,
}

/// Random values on a square lattice, interpolated with smoothstep weights.
#[derive(Clone, Debug)]
struct Octave {
    cell: f64,
    /// Lattice coordinates of the point `(0, 0)`.
    origin: (f64, f64),
    side: usize,
    /// `side × side` values per channel, in `[-amp, amp]`.
    values: [Vec<f64>; 3],
}

impl Octave {
    fn random(rng: &mut ChaCha8Rng, cell: f64, amp: f64, span: f64) -> Self {
        let side = (span / cell).ceil() as usize + 3;
        let origin = (rng.gen_range(1.0..2.0), rng.gen_range(1.0..2.0));
        let mut lattice = || (0..side * side).map(|_| rng.gen_range(-amp..=amp)).collect();
        Octave {
            cell,
            origin,
            side,
            values: [lattice(), lattice(), lattice()],
        }
    }

    fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        let last = (self.side - 1) as f64;
        let gx = (x / self.cell + self.origin.0).clamp(0.0, last);
        let gy = (y / self.cell + self.origin.1).clamp(0.0, last);
        let (x0, y0) = (gx.floor().min(last - 1.0), gy.floor().min(last - 1.0));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - x0), smooth(gy - y0));
        let (x0, y0) = (x0 as usize, y0 as usize);
        let v = |yy: usize, xx: usize| self.values[c][yy * self.side + xx];
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x0 + 1) * fx;
        let bottom = v(y0 + 1, x0) * (1.0 - fx) + v(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Three octaves of value noise around a per-channel base colour, clamped
/// to `[0, 1]`. The coarsest cell spans 10 to 20 pixels so the pattern
/// survives downsampling to the coarse pyramid levels. A continuous
/// function of position, so shifted copies render exactly.
#[derive(Clone, Debug)]
struct Texture {
    octaves: [Octave; 3],
    base: [f64; 3],
}

impl Texture {
    /// `reach` bounds `|x|` and `|y|` of every point the texture is evaluated at.
    fn random(rng: &mut ChaCha8Rng, reach: f64) -> Self {
        let cell = rng.gen_range(10.0..20.0);
        let amp = rng.gen_range(0.2..0.3);
        let base = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
        let mut octave = |c: f64, a: f64| {
            let o = Octave::random(rng, c, a, 2.0 * reach);
            Octave {
                origin: (o.origin.0 + reach / o.cell, o.origin.1 + reach / o.cell),
                ..o
            }
        };
        Texture {
            octaves: [octave(cell, amp), octave(cell / 2.5, 0.6 * amp), octave(cell / 6.25, 0.35 * amp)],
            base,
        }
    }

    fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        (self.base[c] + self.octaves.iter().map(|o| o.eval(c, x, y)).sum::<f64>()).clamp(0.0, 1.0)
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug)]
struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    fn random(rng: &mut ChaCha8Rng, extent: f64) -> Self {
        let cx = rng.gen_range(0.2 * extent..0.8 * extent);
        let cy = rng.gen_range(0.2 * extent..0.8 * extent);
        let radius = rng.gen_range(0.12 * extent..0.3 * extent);
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles.iter().map(|a| (cx + radius * a.cos(), cy + radius * a.sin())).collect();
        Polygon { vertices }
    }

    /// Inside test; the polygon is the convex hull of points on a circle in angular order.
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        })
    }
}

struct Layer {
    texture: Texture,
    shape: Option<Polygon>,
    shift: (f64, f64),
}

impl Layer {
    fn covers_source(&self, x: f64, y: f64) -> bool {
        self.shape.as_ref().is_none_or(|p| p.contains(x, y))
    }
}

/// Index of the topmost layer covering frame-1 point `(x, y)` when every
/// layer is displaced by `shifted` times its translation.
fn topmost(layers: &[Layer], x: f64, y: f64, shifted: bool) -> usize {
    (0..layers.len())
        .rev()
        .find(|&i| {
            let (sx, sy) = if shifted { layers[i].shift } else { (0.0, 0.0) };
            layers[i].covers_source(x - sx, y - sy)
        })
        .expect("background covers everything")
}

/// Renders one scene.
pub fn render_scene(seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.extent;
    let d = cfg.max_displacement;
    let reach = e as f64 + d + 1.0;
    let shift = |rng: &mut ChaCha8Rng| if d > 0.0 { (rng.gen_range(-d..=d), rng.gen_range(-d..=d)) } else { (0.0, 0.0) };
    let mut layers = vec![Layer {
        texture: Texture::random(&mut rng, reach),
        shape: None,
        shift: shift(&mut rng),
    }];
    let objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    for _ in 0..objects {
        layers.push(Layer {
            texture: Texture::random(&mut rng, reach),
            shape: Some(Polygon::random(&mut rng, e as f64)),
            shift: shift(&mut rng),
        });
    }
    Ok(paint(&layers, e))
}

fn paint(layers: &[Layer], e: usize) -> SyntheticSample {
    let mut image1 = Tensor::zeros([1, 3, e, e]);
    let mut image2 = Tensor::zeros([1, 3, e, e]);
    let mut flow = Tensor::zeros([1, 2, e, e]);
    let mut valid = Tensor::zeros([1, 1, e, e]);
    let mut noc = Tensor::zeros([1, 1, e, e]);
    for y in 0..e {
        for x in 0..e {
            let (xf, yf) = (x as f64, y as f64);
            let l1 = topmost(layers, xf, yf, false);
            let (u, v) = layers[l1].shift;
            let l2 = topmost(layers, xf, yf, true);
            let (sx, sy) = layers[l2].shift;
            for c in 0..3 {
                image1.set(0, c, y, x, layers[l1].texture.eval(c, xf, yf));
                image2.set(0, c, y, x, layers[l2].texture.eval(c, xf - sx, yf - sy));
            }
            flow.set(0, 0, y, x, u);
            flow.set(0, 1, y, x, v);
            let (tx, ty) = (xf + u, yf + v);
            let inside = tx >= 0.0 && ty >= 0.0 && tx <= (e - 1) as f64 && ty <= (e - 1) as f64;
            if inside {
                valid.set(0, 0, y, x, 1.0);
                if topmost(layers, tx, ty, true) == l1 {
                    noc.set(0, 0, y, x, 1.0);
                }
            }
        }
    }
    SyntheticSample {
        image1,
        image2,
        flow,
        valid,
        noc,
    }
}

/// Scene with a single textured plane moving by `shift`.
pub fn global_translation(seed: u64, extent: usize, shift: (f64, f64)) -> Result<SyntheticSample> {
    SyntheticConfig { extent, ..Default::default() }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = extent as f64 + shift.0.abs().max(shift.1.abs()) + 1.0;
    let layers = [Layer {
        texture: Texture::random(&mut rng, reach),
        shape: None,
        shift,
    }];
    Ok(paint(&layers, extent))
}

/// `count` scenes with the default generator; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(seed: u64, count: usize, extent: usize) -> Result<Vec<SyntheticSample>> {
    let cfg = SyntheticConfig { extent, ..Default::default() };
    (0..count).map(|i| render_scene(sample_seed(seed, i as u64), &cfg)).collect()
}

/// Seed of sample `index` in the stream identified by `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17)
}

impl SyntheticSample {
    /// Mirrors left to right; the horizontal flow component changes sign.
    pub fn flip_horizontal(&self) -> SyntheticSample {
        let mut flow = self.flow.flip_horizontal();
        flow.plane_mut(0, 0).iter_mut().for_each(|u| *u = -*u);
        SyntheticSample {
            image1: self.image1.flip_horizontal(),
            image2: self.image2.flip_horizontal(),
            flow,
            valid: self.valid.flip_horizontal(),
            noc: self.noc.flip_horizontal(),
        }
    }

    /// `h × w` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<SyntheticSample> {
        let s = self.image1.shape();
        if y + h > s.h || x + w > s.w {
            return Err(Error::dim("crop", format!("{h}×{w} window at ({y}, {x}) exceeds {s}")));
        }
        let cut = |t: &Tensor| Tensor::from_fn(t.shape().with_hw(h, w), |n, c, yy, xx| t.at(n, c, y + yy, x + xx));
        Ok(SyntheticSample {
            image1: cut(&self.image1),
            image2: cut(&self.image2),
            flow: cut(&self.flow),
            valid: cut(&self.valid),
            noc: cut(&self.noc),
        })
    }
}

/// Random crop to `crop × crop` and, if `flip`, a horizontal mirror with probability ½.
pub fn augment(sample: &SyntheticSample, crop: usize, flip: bool, rng: &mut impl Rng) -> Result<SyntheticSample> {
    let s = sample.image1.shape();
    if crop > s.h || crop > s.w {
        return Err(Error::Config(format!("crop {crop} larger than sample {s}")));
    }
    let y = rng.gen_range(0..=s.h - crop);
    let x = rng.gen_range(0..=s.w - crop);
    let out = sample.crop(y, x, crop, crop)?;
    Ok(if flip && rng.gen_bool(0.5) { out.flip_horizontal() } else { out })
}

/// Stacks samples into batched `(image1, image2, flow)` tensors.
pub fn batch(samples: &[SyntheticSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let i1: Vec<&Tensor> = samples.iter().map(|s| &s.image1).collect();
    let i2: Vec<&Tensor> = samples.iter().map(|s| &s.image2).collect();
    let fl: Vec<&Tensor> = samples.iter().map(|s| &s.flow).collect();
    Ok((Tensor::stack(&i1)?, Tensor::stack(&i2)?, Tensor::stack(&fl)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_translation_flow_is_constant() {
        let s = global_translation(3, 32, (2.5, -1.25)).unwrap();
        assert!(s.flow.plane(0, 0).iter().all(|&u| u == 2.5));
        assert!(s.flow.plane(0, 1).iter().all(|&v| v == -1.25));
        // Exactly rendered: image2 at x + t equals image1 at x for integer-aligned points.
        let s = global_translation(3, 32, (3.0, 2.0)).unwrap();
        for c in 0..3 {
            assert_eq!(s.image2.at(0, c, 12, 13), s.image1.at(0, c, 10, 10));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(9, 3, 32).unwrap();
        let b = generate_synthetic(9, 3, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn masks_nest() {
        for s in generate_synthetic(4, 5, 64).unwrap() {
            for (n, v) in s.noc.data().iter().zip(s.valid.data()) {
                assert!(n <= v);
            }
            assert!(s.image1.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = &generate_synthetic(5, 1, 32).unwrap()[0];
        assert_eq!(&s.flip_horizontal().flip_horizontal(), s);
        let f = s.flip_horizontal();
        assert_eq!(f.flow.at(0, 0, 3, 0), -s.flow.at(0, 0, 3, 31));
    }

    #[test]
    fn rejects_bad_extent() {
        assert!(generate_synthetic(0, 1, 48).is_err());
    }
}
