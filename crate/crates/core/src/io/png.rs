//! 8-bit PNG read/write mapped to `[0, 1]` float tensors.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{DrnError, Result};
use crate::tensor::Tensor;

/// Reads an 8-bit RGB or grayscale PNG into a `(1, 3, h, w)` tensor scaled by
/// 1/255. Grayscale is replicated across the three channels.
pub fn png_read(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => DrnError::io(path, io),
        other => DrnError::Format(format!("{}: {other}", path.display())),
    })?;
    match img.color() {
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            return Err(DrnError::Format(format!(
                "{}: 16-bit PNG is not supported (8-bit RGB or grayscale only)",
                path.display()
            )));
        }
        _ => {}
    }
    let rgb = match img {
        DynamicImage::ImageLuma8(gray) => DynamicImage::ImageLuma8(gray).to_rgb8(),
        other => other.to_rgb8(),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *out.at_mut(0, c, y, x) = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Quantizes a `(1, 3, h, w)` tensor in `[0, 1]` to 8-bit and writes an RGB
/// PNG. The write is atomic: a temp file in the same directory is renamed
/// over the target.
pub fn png_write(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let [n, c, h, w] = img.shape();
    if n != 1 || c != 3 || h == 0 || w == 0 {
        return Err(DrnError::InvalidArgument(format!(
            "png_write expects a non-empty (1, 3, h, w) image, got {:?}",
            img.shape()
        )));
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| quantize_u8(img.at(0, ch, y, x)));
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let tmp = path.with_extension("png.tmp");
    rgb.save_with_format(&tmp, ImageFormat::Png)
        .map_err(|e| DrnError::Format(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| DrnError::io(path, e))
}

/// `round(clamp(v, 0, 1) * 255)`.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn write_read_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..3 * 5 * 4)
            .map(|_| rng.gen_range(0u8..=255) as f32 / 255.0)
            .collect();
        let img = Tensor::new([1, 3, 5, 4], data).unwrap();
        png_write(&img, &path).unwrap();
        let back = png_read(&path).unwrap();
        assert_eq!(back.shape(), [1, 3, 5, 4]);
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 10 + y * 50) as u8]));
        gray.save(&path).unwrap();
        let t = png_read(&path).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        for y in 0..2 {
            for x in 0..3 {
                let v = t.at(0, 0, y, x);
                assert_eq!(t.at(0, 1, y, x), v);
                assert_eq!(t.at(0, 2, y, x), v);
            }
        }
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img16 = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(2, 2, |x, y| {
            image::Luma([(x * 1000 + y * 300) as u16])
        });
        img16.save(&path).unwrap();
        let err = png_read(&path).unwrap_err();
        assert!(err.to_string().contains("16-bit"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = png_read(Path::new("/nonexistent/missing.png")).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }
}
