//! PNG conversion. Image tensors are `[H, W, 3]` in `[-1, 1]`; masks are
//! `[H, W]` in `[0, 1]`.

use std::io::Cursor;

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat, RgbImage};
use pc_core::Tensor;

use crate::{PcError, PcResult};

fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> PcResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img(&mut buf)?;
    Ok(buf.into_inner())
}

pub fn image_to_png(t: &Tensor) -> PcResult<Vec<u8>> {
    let [h, w, c] = match *t.shape() {
        [h, w, 3] => [h, w, 3],
        ref s => return Err(PcError::Config(format!("image tensor has shape {s:?}, expected [H, W, 3]"))),
    };
    let raw = t.data().iter().map(|&v| to_u8((v + 1.0) / 2.0)).collect::<Vec<_>>();
    debug_assert_eq!(raw.len(), h * w * c);
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    encode(|b| img.write_to(b, ImageFormat::Png))
}

pub fn mask_to_png(t: &Tensor) -> PcResult<Vec<u8>> {
    let [h, w] = match *t.shape() {
        [h, w] => [h, w],
        ref s => return Err(PcError::Config(format!("mask tensor has shape {s:?}, expected [H, W]"))),
    };
    let raw = t.data().iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    encode(|b| img.write_to(b, ImageFormat::Png))
}

/// Decodes any supported image, resizes it to `shape` when needed and maps
/// 0..255 to `[-1, 1]`.
pub fn decode_image(bytes: &[u8], shape: [usize; 3]) -> PcResult<Tensor> {
    if shape[2] != 3 {
        return Err(PcError::Config(format!("only RGB images are supported, not {shape:?}")));
    }
    let mut img = image::load_from_memory(bytes)?.to_rgb8();
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    if img.dimensions() != (w, h) {
        img = image::imageops::resize(&img, w, h, FilterType::Triangle);
    }
    let data = img.into_raw().into_iter().map(|b| b as f64 / 127.5 - 1.0).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn read_image(path: &std::path::Path, shape: [usize; 3]) -> PcResult<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| PcError::io(path, e))?;
    decode_image(&bytes, shape)
}

pub fn write_png(path: &std::path::Path, png: &[u8]) -> PcResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PcError::io(dir, e))?;
    }
    std::fs::write(path, png).map_err(|e| PcError::io(path, e))
}
