//! Flow and image files: Middlebury `.flo`, KITTI 16-bit PNG, PNG/PPM images.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use liteflow_tensor::Tensor;

use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

/// Encodes a `1 × 2 × H × W` flow as `.flo` bytes.
pub fn encode_flo(flow: &Tensor) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 || s.h == 0 || s.w == 0 {
        return Err(Error::dim("encode_flo", format!("expected a non-empty 1×2×H×W flow, got {s}")));
    }
    let (w, h) = (i32::try_from(s.w), i32::try_from(s.h));
    let (Ok(w), Ok(h)) = (w, h) else {
        return Err(Error::Format(format!("flow extent {s} exceeds the .flo header range")));
    };
    let mut out = Vec::with_capacity(12 + 8 * s.h * s.w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
    for i in 0..s.h * s.w {
        out.extend_from_slice(&(u[i] as f32).to_le_bytes());
        out.extend_from_slice(&(v[i] as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4).map(|b| b.try_into().expect("4 bytes")) };
    let magic = word(0).map(f32::from_le_bytes);
    if magic != Some(FLO_MAGIC) {
        return Err(Error::Format(format!(".flo magic {magic:?} is not {FLO_MAGIC}")));
    }
    let (Some(w), Some(h)) = (word(1).map(i32::from_le_bytes), word(2).map(i32::from_le_bytes)) else {
        return Err(Error::Format("truncated .flo header".into()));
    };
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!(".flo extent {w}×{h} must be positive")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() != need {
        return Err(Error::Format(format!(".flo payload is {} bytes, header implies {need}", bytes.len())));
    }
    let mut flow = Tensor::zeros([1, 2, h, w]);
    for i in 0..h * w {
        let u = f32::from_le_bytes(word(3 + 2 * i).expect("length checked"));
        let v = f32::from_le_bytes(word(4 + 2 * i).expect("length checked"));
        flow.plane_mut(0, 0)[i] = u as f64;
        flow.plane_mut(0, 1)[i] = v as f64;
    }
    Ok(flow)
}

pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub const KITTI_ZERO: f64 = 32768.0;
pub const KITTI_SCALE: f64 = 64.0;

pub fn kitti_encode(v: f64) -> u16 {
    (v * KITTI_SCALE + KITTI_ZERO).round().clamp(0.0, 65535.0) as u16
}

pub fn kitti_decode(raw: u16) -> f64 {
    (raw as f64 - KITTI_ZERO) / KITTI_SCALE
}

/// Writes `flow` (`1 × 2 × H × W`) with validity `valid` (`1 × 1 × H × W`,
/// nonzero = valid; all valid when absent).
pub fn write_kitti_png(path: &Path, flow: &Tensor, valid: Option<&Tensor>) -> Result<()> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 {
        return Err(Error::dim("write_kitti_png", format!("expected 1×2×H×W, got {s}")));
    }
    if let Some(m) = valid {
        if m.shape() != s.with_c(1) {
            return Err(Error::dim("write_kitti_png", format!("mask {} vs flow {s}", m.shape())));
        }
    }
    let mut img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        let ok = valid.map_or(true, |m| m.at(0, 0, y, x) != 0.0);
        *px = Rgb([kitti_encode(flow.at(0, 0, y, x)), kitti_encode(flow.at(0, 1, y, x)), ok as u16]);
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Returns the flow and its validity mask.
pub fn read_kitti_png(path: &Path) -> Result<(Tensor, Tensor)> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let DynamicImage::ImageRgb16(img) = img else {
        return Err(Error::Format(format!("{}: KITTI flow must be a 16-bit RGB PNG, found {:?}", path.display(), img.color())));
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut flow = Tensor::zeros([1, 2, h, w]);
    let mut valid = Tensor::zeros([1, 1, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        flow.set(0, 0, y, x, kitti_decode(px[0]));
        flow.set(0, 1, y, x, kitti_decode(px[1]));
        valid.set(0, 0, y, x, (px[2] != 0) as u8 as f64);
    }
    Ok((flow, valid))
}

/// A flow from `.flo` or KITTI PNG, chosen by extension, plus its validity.
pub fn read_flow_any(path: &Path) -> Result<(Tensor, Option<Tensor>)> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("flo") => Ok((read_flo(path)?, None)),
        Some("png") => read_kitti_png(path).map(|(f, v)| (f, Some(v))),
        _ => Err(Error::Usage(format!("{}: flow files must be .flo or .png", path.display()))),
    }
}

/// Loads a PNG/PPM/PGM image as `1 × 3 × H × W` in byte range; gray images are replicated.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64))
}

/// Loads a mask image; any nonzero sample marks the pixel as set.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Tensor::from_fn([1, 1, h, w], |_, _, y, x| (g.get_pixel(x as u32, y as u32)[0] != 0) as u8 as f64))
}

/// Writes `1 × 3 × H × W` values in `[0, 1]` as an 8-bit PNG (or PPM by extension).
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::dim("write_rgb", format!("expected 1×3×H×W, got {s}")));
    }
    let img = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| (image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `1 × 1 × H × W` values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim("write_gray", format!("expected 1×1×H×W, got {s}")));
    }
    let img = image::GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Luma([(image.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_header_layout() {
        let f = Tensor::from_fn([1, 2, 3, 5], |_, c, y, x| (c * 100 + y * 10 + x) as f64 * 0.25);
        let b = encode_flo(&f).unwrap();
        assert_eq!(&b[..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(b[4..8].try_into().unwrap()), 5);
        assert_eq!(i32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(decode_flo(&b).unwrap(), f);
    }

    #[test]
    fn flo_rejects_bad_input() {
        assert!(decode_flo(b"PIEX\x01\0\0\0\x01\0\0\0").is_err());
        let mut b = encode_flo(&Tensor::zeros([1, 2, 2, 2])).unwrap();
        b.pop();
        assert!(decode_flo(&b).is_err());
        assert!(encode_flo(&Tensor::zeros([1, 2, 0, 3])).is_err());
        let mut zero = b"PIEH".to_vec();
        zero.extend([0u8; 8]);
        assert!(decode_flo(&zero).is_err());
    }

    #[test]
    fn kitti_encoding_points() {
        assert_eq!(kitti_decode(32768), 0.0);
        assert_eq!(kitti_encode(1.0), 32832);
        assert_eq!(kitti_decode(32832), 1.0);
    }
}
