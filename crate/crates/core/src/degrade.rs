//! Degradation kernels: bicubic resampling, nearest subsampling, and
//! Gaussian-blur-then-downsample, plus paired dataset generation.

use std::path::Path;

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::io::png::png_read;
use crate::tensor::Tensor;

/// Degradation method. `BdGaussian` blurs with a normalized 2-D Gaussian and
/// then subsamples with stride `scale` at offset 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Bicubic,
    Nearest,
    BdGaussian { size: usize, sigma: f64 },
}

/// Stock blur used for BD data: 7x7, sigma 1.6.
pub const BD_DEFAULT_SIZE: usize = 7;
pub const BD_DEFAULT_SIGMA: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationKernel {
    pub kind: KernelKind,
    pub scale: usize,
}

impl DegradationKernel {
    pub fn new(kind: KernelKind, scale: usize) -> Result<Self> {
        if !matches!(scale, 2 | 4 | 8) {
            return Err(DrnError::InvalidArgument(format!(
                "degradation scale must be one of 2, 4, 8, got {scale}"
            )));
        }
        if let KernelKind::BdGaussian { size, sigma } = kind {
            if size < 3 || size % 2 == 0 {
                return Err(DrnError::InvalidArgument(format!(
                    "BD kernel size must be odd and >= 3, got {size}"
                )));
            }
            if sigma <= 0.0 {
                return Err(DrnError::InvalidArgument(format!(
                    "BD sigma must be positive, got {sigma}"
                )));
            }
        }
        Ok(DegradationKernel { kind, scale })
    }

    /// Produces the LR image for an HR input with `scale`-divisible dims.
    pub fn apply<E: Element>(&self, hr: &Tensor<E>) -> Result<Tensor<E>> {
        let [_, _, h, w] = hr.shape();
        match self.kind {
            KernelKind::Bicubic => bicubic_resize(hr, h / self.scale, w / self.scale),
            KernelKind::Nearest => nearest_downsample(hr, self.scale),
            KernelKind::BdGaussian { size, sigma } => bd_degrade(hr, size, sigma, self.scale),
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = DrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bicubic" => Ok(KernelKind::Bicubic),
            "nearest" => Ok(KernelKind::Nearest),
            "bd" => Ok(KernelKind::BdGaussian {
                size: BD_DEFAULT_SIZE,
                sigma: BD_DEFAULT_SIGMA,
            }),
            other => Err(DrnError::InvalidArgument(format!(
                "unknown kernel {other:?} (expected bicubic, nearest, or bd)"
            ))),
        }
    }
}

/// Cubic convolution kernel with a = -0.5.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let ax = x.abs();
    if ax <= 1.0 {
        (a + 2.0) * ax * ax * ax - (a + 3.0) * ax * ax + 1.0
    } else if ax < 2.0 {
        a * ax * ax * ax - 5.0 * a * ax * ax + 8.0 * a * ax - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-pixel resampling taps along one axis, half-pixel centered.
///
/// When shrinking, the kernel support widens by the inverse scale so the
/// filter acts as an antialiasing low-pass. Weights are normalized to sum 1;
/// tap indices may fall outside `[0, in_len)` and are clamped at apply time.
pub fn bicubic_weights(in_len: usize, out_len: usize) -> Vec<(isize, Vec<f64>)> {
    let ratio = in_len as f64 / out_len as f64;
    let kscale = ratio.max(1.0);
    let kernel_width = 4.0 * kscale;
    let taps = kernel_width.ceil() as usize + 2;
    (0..out_len)
        .map(|j| {
            let center = (j as f64 + 0.5) * ratio - 0.5;
            let left = (center - kernel_width / 2.0).floor() as isize;
            let mut weights: Vec<f64> = (0..taps)
                .map(|t| cubic((center - (left + t as isize) as f64) / kscale) / kscale)
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            (left, weights)
        })
        .collect()
}

/// Cubic-convolution resize (a = -0.5) with antialiasing on downscale and
/// edge handling by index clamping. Separable: rows, then columns.
pub fn bicubic_resize<E: Element>(
    image: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let [n, c, h, w] = image.shape();
    if h == 0 || w == 0 || n * c == 0 {
        return Err(DrnError::InvalidArgument("bicubic_resize: empty image".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(DrnError::InvalidArgument(format!(
            "bicubic_resize: target size ({out_h}, {out_w}) must be >= 1"
        )));
    }
    let wy = bicubic_weights(h, out_h);
    let wx = bicubic_weights(w, out_w);

    // Rows pass: (h, w) -> (out_h, w).
    let mut mid = Tensor::<E>::zeros([n, c, out_h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = image.plane(ni, ci);
            let dst = mid.plane_mut(ni, ci);
            for (oy, (left, weights)) in wy.iter().enumerate() {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (t, &wv) in weights.iter().enumerate() {
                        let iy = (left + t as isize).clamp(0, h as isize - 1) as usize;
                        acc += wv * src[iy * w + x].to_f64_val();
                    }
                    dst[oy * w + x] = E::from_f64_val(acc);
                }
            }
        }
    }

    // Columns pass: (out_h, w) -> (out_h, out_w).
    let mut out = Tensor::<E>::zeros([n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = mid.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for oy in 0..out_h {
                for (ox, (left, weights)) in wx.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for (t, &wv) in weights.iter().enumerate() {
                        let ix = (left + t as isize).clamp(0, w as isize - 1) as usize;
                        acc += wv * src[oy * w + ix].to_f64_val();
                    }
                    dst[oy * out_w + ox] = E::from_f64_val(acc);
                }
            }
        }
    }
    Ok(out)
}

/// Top-left sample per `s x s` cell: `out(i, j) = in(s*i, s*j)`.
pub fn nearest_downsample<E: Element>(image: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let [n, c, h, w] = image.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(DrnError::InvalidArgument(format!(
            "nearest_downsample: size ({h}, {w}) is not divisible by scale {s}"
        )));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(ni, ci, y, x) = image.at(ni, ci, y * s, x * s);
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 2-D Gaussian table, row-major `size x size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut table = Vec::with_capacity(size * size);
    for dy in -half..=half {
        for dx in -half..=half {
            table.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = table.iter().sum();
    for v in &mut table {
        *v /= sum;
    }
    table
}

/// Gaussian blur with reflect padding (mirror without edge repeat), then
/// stride-`s` subsampling at offset 0.
pub fn bd_degrade<E: Element>(
    image: &Tensor<E>,
    size: usize,
    sigma: f64,
    s: usize,
) -> Result<Tensor<E>> {
    let [n, c, h, w] = image.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(DrnError::InvalidArgument(format!(
            "bd_degrade: size ({h}, {w}) is not divisible by scale {s}"
        )));
    }
    let half = size / 2;
    if h <= half || w <= half {
        return Err(DrnError::InvalidArgument(format!(
            "bd_degrade: image ({h}, {w}) is too small for a {size}x{size} kernel"
        )));
    }
    let table = gaussian_kernel(size, sigma);
    let reflect = |p: isize, len: usize| -> usize {
        if p < 0 {
            (-p) as usize
        } else if p >= len as isize {
            2 * len - 2 - p as usize
        } else {
            p as usize
        }
    };
    let (oh, ow) = (h / s, w / s);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let src = image.plane(ni, ci);
            for y in 0..oh {
                for x in 0..ow {
                    let (cy, cx) = ((y * s) as isize, (x * s) as isize);
                    let mut acc = 0.0f64;
                    for ky in 0..size {
                        let iy = reflect(cy + ky as isize - half as isize, h);
                        for kx in 0..size {
                            let ix = reflect(cx + kx as isize - half as isize, w);
                            acc += table[ky * size + kx] * src[iy * w + ix].to_f64_val();
                        }
                    }
                    *out.at_mut(ni, ci, y, x) = E::from_f64_val(acc);
                }
            }
        }
    }
    Ok(out)
}

/// One LR/HR training pair; HR dims are exact `scale` multiples of LR dims.
#[derive(Debug, Clone)]
pub struct ImagePair<E: Element = f32> {
    pub name: String,
    pub lr: Tensor<E>,
    pub hr: Tensor<E>,
}

#[derive(Debug, Default)]
pub struct PairedDataset<E: Element = f32> {
    pub pairs: Vec<ImagePair<E>>,
    pub warnings: Vec<String>,
}

/// LR-only images with unknown degradation.
#[derive(Debug, Default)]
pub struct UnpairedDataset<E: Element = f32> {
    pub images: Vec<(String, Tensor<E>)>,
}

/// Crops so both dims are divisible by `s` (top-left anchored).
pub fn crop_divisible<E: Element>(image: &Tensor<E>, s: usize) -> Tensor<E> {
    let [n, c, h, w] = image.shape();
    let (ch, cw) = (h - h % s, w - w % s);
    if ch == h && cw == w {
        return image.clone();
    }
    let mut out = Tensor::zeros([n, c, ch, cw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ch {
                let src = &image.plane(ni, ci)[y * w..y * w + cw];
                out.plane_mut(ni, ci)[y * cw..(y + 1) * cw].copy_from_slice(src);
            }
        }
    }
    out
}

/// Sorted PNG paths under `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| DrnError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Builds LR/HR pairs from a directory of HR images. Each HR image is cropped
/// to `scale`-divisible dims and degraded with the chosen kernel. Undecodable
/// files are skipped with a recorded warning; pairing order is sorted by
/// filename.
pub fn make_pairs<E: Element>(hr_dir: &Path, kernel: &DegradationKernel) -> Result<PairedDataset<E>> {
    let files = list_pngs(hr_dir)?;
    let mut dataset = PairedDataset {
        pairs: Vec::new(),
        warnings: Vec::new(),
    };
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let hr = match png_read(&path) {
            Ok(img) => img,
            Err(e) => {
                dataset.warnings.push(format!("skipping {name}: {e}"));
                continue;
            }
        };
        let hr: Tensor<E> = hr.cast();
        let hr = crop_divisible(&hr, kernel.scale);
        let lr = kernel.apply(&hr)?;
        dataset.pairs.push(ImagePair { name, lr, hr });
    }
    if dataset.pairs.is_empty() {
        return Err(DrnError::InvalidArgument(format!(
            "no decodable PNG images in {}",
            hr_dir.display()
        )));
    }
    Ok(dataset)
}

/// Loads a directory of LR-only PNG images, sorted by filename.
pub fn load_unpaired<E: Element>(lr_dir: &Path) -> Result<UnpairedDataset<E>> {
    let files = list_pngs(lr_dir)?;
    let mut images = Vec::new();
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match png_read(&path) {
            Ok(img) => images.push((name, img.cast())),
            Err(_) => continue,
        }
    }
    if images.is_empty() {
        return Err(DrnError::InvalidArgument(format!(
            "no decodable PNG images in {}",
            lr_dir.display()
        )));
    }
    Ok(UnpairedDataset { images })
}
