//! NetC: the shared two-stream feature pyramid.

use liteflow_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvSpec};

/// Channels of pyramid levels 1..=6.
pub const PYRAMID_CHANNELS: [usize; 6] = [32, 32, 64, 96, 128, 192];

/// Convolutions per resolution block; the first of each block after level 1 halves the extent.
pub const BLOCK_DEPTHS: [usize; 6] = [1, 3, 2, 2, 1, 1];

/// Input extents must be multiples of this.
pub const EXTENT_MULTIPLE: usize = 32;

/// Layer names in order, matching the conventional NetC naming.
pub fn layer_names() -> Vec<String> {
    let mut names = Vec::new();
    for (level, &depth) in BLOCK_DEPTHS.iter().enumerate() {
        for i in 0..depth {
            names.push(if depth == 1 { format!("conv{}", level + 1) } else { format!("conv{}_{}", level + 1, i + 1) });
        }
    }
    names
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
    /// Index into `layers` of the last conv of each level.
    pub taps: [usize; 6],
}

/// Features of one image; `levels[k - 1]` is level `k`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn level(&self, k: usize) -> Var {
        self.levels[k - 1]
    }
}

impl Encoder {
    pub fn register(store: &mut ParamStore, slope: f64) -> Result<Self> {
        let names = layer_names();
        let mut layers = Vec::with_capacity(names.len());
        let mut taps = [0; 6];
        let mut in_ch = 3;
        let mut idx = 0;
        for (level, &depth) in BLOCK_DEPTHS.iter().enumerate() {
            let out_ch = PYRAMID_CHANNELS[level];
            for i in 0..depth {
                let kernel = if level == 0 { 7 } else { 3 };
                let stride = if level > 0 && i == 0 { 2 } else { 1 };
                let spec = ConvSpec::new(in_ch, out_ch, kernel, stride);
                layers.push(ConvLayer::register(store, format!("netc/{}", names[idx]), spec, Some(slope))?);
                in_ch = out_ch;
                idx += 1;
            }
            taps[level] = idx - 1;
        }
        Ok(Encoder { layers, taps })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.parameter_count()).sum()
    }

    /// Features of one normalized image batch `n × 3 × H × W`.
    pub fn pyramid(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        if s.c != 3 || s.h % EXTENT_MULTIPLE != 0 || s.w % EXTENT_MULTIPLE != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::dim(
                "netc",
                format!("expected 3-channel input with extents that are multiples of {EXTENT_MULTIPLE}, got {s}"),
            ));
        }
        let mut levels = Vec::with_capacity(6);
        let mut cur = image;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(g, cur)?;
            if self.taps.contains(&i) {
                levels.push(cur);
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// Runs both images through the same layers.
    pub fn forward(&self, g: &mut Graph, image1: Var, image2: Var) -> Result<(FeaturePyramid, FeaturePyramid)> {
        Ok((self.pyramid(g, image1)?, self.pyramid(g, image2)?))
    }
}

/// Pixel range of raw images handed to [`normalize_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    Unit,
    Byte,
}

/// A mean-free image together with the removed per-channel means.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    pub image: Tensor,
    /// `means[n * c + channel]`, in unit range.
    pub means: Vec<f64>,
}

/// Scales to `[0, 1]` and subtracts each image's per-channel mean.
pub fn normalize_image(raw: &Tensor, range: PixelRange) -> Result<NormalizedImage> {
    let s = raw.shape();
    if s.c != 3 {
        return Err(Error::dim("normalize_image", format!("expected 3 channels, got {s}")));
    }
    let scale = match range {
        PixelRange::Unit => 1.0,
        PixelRange::Byte => 1.0 / 255.0,
    };
    let mut image = raw.map(|v| v * scale);
    let mut means = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = image.plane_mut(n, c);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            plane.iter_mut().for_each(|v| *v -= mean);
            means.push(mean);
        }
    }
    Ok(NormalizedImage { image, means })
}

impl NormalizedImage {
    /// Adds the means back, giving unit-range values.
    pub fn restore(&self) -> Tensor {
        let s = self.image.shape();
        let mut out = self.image.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let m = self.means[n * s.c + c];
                out.plane_mut(n, c).iter_mut().for_each(|v| *v += m);
            }
        }
        out
    }
}

/// Smallest multiple of [`EXTENT_MULTIPLE`] not below `extent`.
pub fn padded_extent(extent: usize) -> usize {
    extent.div_ceil(EXTENT_MULTIPLE).max(1) * EXTENT_MULTIPLE
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_table() {
        let mut store = ParamStore::new();
        let e = Encoder::register(&mut store, 0.1).unwrap();
        let got: Vec<(String, usize, usize, usize, usize)> = e
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.spec.kernel, l.spec.stride, l.spec.in_ch, l.spec.out_ch))
            .collect();
        let want = [
            ("conv1", 7, 1, 3, 32),
            ("conv2_1", 3, 2, 32, 32),
            ("conv2_2", 3, 1, 32, 32),
            ("conv2_3", 3, 1, 32, 32),
            ("conv3_1", 3, 2, 32, 64),
            ("conv3_2", 3, 1, 64, 64),
            ("conv4_1", 3, 2, 64, 96),
            ("conv4_2", 3, 1, 96, 96),
            ("conv5", 3, 2, 96, 128),
            ("conv6", 3, 2, 128, 192),
        ];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert_eq!((g.0.as_str(), g.1, g.2, g.3, g.4), (format!("netc/{}", w.0).as_str(), w.1, w.2, w.3, w.4));
        }
        let closed_form: usize = want.iter().map(|w| w.1 * w.1 * w.3 * w.4 + w.4).sum();
        assert_eq!(e.parameter_count(), closed_form);
        assert_eq!(store.total_elements(), closed_form);
        assert_eq!(e.taps, [0, 3, 5, 7, 8, 9]);
    }

    #[test]
    fn normalization_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let raw = Tensor::uniform([2, 3, 4, 5], 0.0, 255.0, &mut r);
        let norm = normalize_image(&raw, PixelRange::Byte).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                assert!(norm.image.plane(n, c).iter().sum::<f64>().abs() / 20.0 < 1e-12);
            }
        }
        let back = norm.restore().map(|v| v * 255.0);
        assert!(back.max_abs_diff(&raw).unwrap() < 1e-12);
        let gray = normalize_image(&Tensor::full([1, 3, 4, 4], 0.5), PixelRange::Unit).unwrap();
        assert_eq!(gray.image.max_abs(), 0.0);
    }

    #[test]
    fn extents_rounded_up() {
        assert_eq!(padded_extent(64), 64);
        assert_eq!(padded_extent(65), 96);
        assert_eq!(padded_extent(1), 32);
    }
}
