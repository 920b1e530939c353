//! CLIP image preprocessing: bicubic resize of the shorter side to 224,
//! center crop, scale to [0, 1], per-channel normalization, CHW layout.

use image::imageops::FilterType;
use image::RgbImage;

pub const IMAGE_SIZE: u32 = 224;
pub const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
#[allow(clippy::excessive_precision)]
pub const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

/// Decodes any format the `image` crate knows and converts to RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

/// Output size with the shorter side at `size`; the longer side is
/// truncated, as torchvision computes it.
pub fn resized_dims(w: u32, h: u32, size: u32) -> (u32, u32) {
    let (short, long) = if w <= h { (w, h) } else { (h, w) };
    let new_long = (f64::from(size) * f64::from(long) / f64::from(short)) as u32;
    if w <= h {
        (size, new_long)
    } else {
        (new_long, size)
    }
}

/// Offset of a centered `size` window inside `total`, rounded half to even.
pub fn crop_offset(total: u32, size: u32) -> u32 {
    (f64::from(total - size) / 2.0).round_ties_even() as u32
}

/// `3 * 224 * 224` normalized floats in CHW order.
pub fn preprocess(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let (nw, nh) = resized_dims(w, h, IMAGE_SIZE);
    let resized;
    let src = if (nw, nh) == (w, h) {
        img
    } else {
        resized = image::imageops::resize(img, nw, nh, FilterType::CatmullRom);
        &resized
    };
    let left = crop_offset(nw, IMAGE_SIZE);
    let top = crop_offset(nh, IMAGE_SIZE);
    let plane = (IMAGE_SIZE * IMAGE_SIZE) as usize;
    let mut out = vec![0f32; 3 * plane];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = src.get_pixel(left + x, top + y);
            let at = (y * IMAGE_SIZE + x) as usize;
            for c in 0..3 {
                let v = f32::from(px[c]) / 255.0;
                out[c * plane + at] = (v - MEAN[c]) / STD[c];
            }
        }
    }
    out
}
