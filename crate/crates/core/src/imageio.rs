//! PNG encoding of images (`[-1, 1]` floats <-> 8-bit RGB) and masks
//! (0 / 255 single channel).

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::maskops::InstanceMask;
use crate::tensor::Tensor;

pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

/// Round an image to the values it will have after an 8-bit save and load.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| from_u8(to_u8(v)))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn save_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "save_rgb expects 3 channels, got {c}"
        )));
    }
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    ensure_parent(path)?;
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = from_u8(p[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn save_mask(path: &Path, mask: &InstanceMask) -> Result<()> {
    let w = mask.width();
    let out = GrayImage::from_fn(w as u32, mask.height() as u32, |x, y| {
        Luma([if mask.data()[y as usize * w + x as usize] == 1 {
            255
        } else {
            0
        }])
    });
    ensure_parent(path)?;
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Soft `[0, 1]` grid of `height * width` values as an 8-bit grayscale image.
pub fn save_soft(path: &Path, soft: &[f32], height: usize, width: usize) -> Result<()> {
    if soft.len() != height * width {
        return Err(Error::Shape(format!(
            "soft grid of {} values is not {height}x{width}",
            soft.len()
        )));
    }
    let out = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = soft[y as usize * width + x as usize].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    ensure_parent(path)?;
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a mask; with `strict` any value other than 0 or 255 is an error,
/// otherwise pixels at or above 128 are foreground.
pub fn load_mask(path: &Path, strict: bool) -> Result<InstanceMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for p in img.pixels() {
        let v = p[0];
        if strict && v != 0 && v != 255 {
            return Err(Error::Mask(format!(
                "{}: pixel value {v} is not 0 or 255",
                path.display()
            )));
        }
        data.push(u8::from(v >= 128));
    }
    InstanceMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip_is_exact_on_the_grid() {
        for u in 0..=255u8 {
            assert_eq!(to_u8(from_u8(u)), u);
        }
    }

    #[test]
    fn quantization_error_bound() {
        for i in 0..=2000 {
            let v = -1.0 + i as f32 / 1000.0;
            assert!((from_u8(to_u8(v)) - v).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| ((i as f32) * 0.13).sin());
        let p = dir.path().join("a/img.png");
        save_rgb(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), quantize(&img));
        let m = InstanceMask::from_fn(4, 5, |y, x| (x + y) % 3 == 0);
        let mp = dir.path().join("m.png");
        save_mask(&mp, &m).unwrap();
        assert_eq!(load_mask(&mp, true).unwrap(), m);
    }

    #[test]
    fn strict_mask_load_rejects_gray_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("soft.png");
        save_soft(&p, &[0.0, 0.5, 1.0, 0.2], 2, 2).unwrap();
        assert!(load_mask(&p, true).is_err());
        assert_eq!(load_mask(&p, false).unwrap().data(), &[0, 1, 1, 0]);
    }
}
