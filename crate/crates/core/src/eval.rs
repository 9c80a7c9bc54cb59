//! PSNR/SSIM with the standard SR evaluation protocol.
//!
//! Protocol: quantize to 8-bit, optionally convert to the BT.601 Y channel
//! (also quantized), shave a border, then score with peak value 255.

use std::path::Path;

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// Score the quantized BT.601 luma plane (the Set5/Set14 convention).
    Y,
    /// Score all RGB channels.
    Rgb,
}

impl std::str::FromStr for ChannelMode {
    type Err = DrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(ChannelMode::Y),
            "rgb" => Ok(ChannelMode::Rgb),
            other => Err(DrnError::InvalidArgument(format!(
                "unknown channel mode {other:?} (expected y or rgb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub channel: ChannelMode,
    /// Border pixels removed from each side before scoring.
    pub shave: usize,
}

impl EvalProtocol {
    /// Default reporting protocol: Y channel, shave = scale.
    pub fn for_scale(scale: usize) -> Self {
        EvalProtocol {
            channel: ChannelMode::Y,
            shave: scale,
        }
    }

    pub fn describe(&self) -> String {
        let ch = match self.channel {
            ChannelMode::Y => "y",
            ChannelMode::Rgb => "rgb",
        };
        format!("channel={ch} shave={} peak=255 quantize=8bit", self.shave)
    }
}

const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// BT.601 luma `Y = 65.481 R + 128.553 G + 24.966 B + 16` for `[0, 1]`
/// inputs; output values span `[16, 235]`.
pub fn rgb_to_y<E: Element>(image: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = image.shape();
    if c != 3 {
        return Err(DrnError::InvalidArgument(format!(
            "rgb_to_y: expected 3 channels, got {c}"
        )));
    }
    let mut out = Tensor::zeros([n, 1, h, w]);
    for ni in 0..n {
        let (r, g, b) = (image.plane(ni, 0), image.plane(ni, 1), image.plane(ni, 2));
        let dst = out.plane_mut(ni, 0);
        for i in 0..h * w {
            let y = 65.481 * r[i].to_f64_val() + 128.553 * g[i].to_f64_val()
                + 24.966 * b[i].to_f64_val()
                + 16.0;
            dst[i] = E::from_f64_val(y);
        }
    }
    Ok(out)
}

/// Quantized scoring planes on the 0..255 scale, after channel conversion and
/// shaving. One plane in Y mode, three in RGB mode.
fn protocol_planes<E: Element>(
    image: &Tensor<E>,
    protocol: &EvalProtocol,
) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let [n, c, h, w] = image.shape();
    if n != 1 {
        return Err(DrnError::InvalidArgument(format!(
            "metrics expect a single image, got batch {n}"
        )));
    }
    let quantize = |v: E| (v.to_f64_val().clamp(0.0, 1.0) * 255.0).round();
    let full: Vec<Vec<f64>> = match protocol.channel {
        ChannelMode::Rgb => (0..c)
            .map(|ci| image.plane(0, ci).iter().map(|&v| quantize(v)).collect())
            .collect(),
        ChannelMode::Y => {
            if c != 3 {
                return Err(DrnError::InvalidArgument(format!(
                    "Y-channel protocol expects 3 channels, got {c}"
                )));
            }
            let (r, g, b) = (image.plane(0, 0), image.plane(0, 1), image.plane(0, 2));
            let plane = (0..h * w)
                .map(|i| {
                    let y = (65.481 * quantize(r[i]) + 128.553 * quantize(g[i])
                        + 24.966 * quantize(b[i]))
                        / 255.0
                        + 16.0;
                    y.round()
                })
                .collect();
            vec![plane]
        }
    };
    let s = protocol.shave;
    if h <= 2 * s || w <= 2 * s {
        return Err(DrnError::InvalidArgument(format!(
            "image ({h}, {w}) is too small for shave {s}"
        )));
    }
    let (sh, sw) = (h - 2 * s, w - 2 * s);
    let shaved = full
        .into_iter()
        .map(|plane| {
            let mut out = Vec::with_capacity(sh * sw);
            for y in 0..sh {
                out.extend_from_slice(&plane[(y + s) * w + s..(y + s) * w + s + sw]);
            }
            out
        })
        .collect();
    Ok((shaved, sh, sw))
}

/// Peak signal-to-noise ratio in dB; identical images return the 100 dB cap.
pub fn psnr<E: Element>(a: &Tensor<E>, b: &Tensor<E>, protocol: &EvalProtocol) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DrnError::InvalidArgument(format!(
            "psnr: shape {:?} does not match shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, _, _) = protocol_planes(a, protocol)?;
    let (pb, _, _) = protocol_planes(b, protocol)?;
    let mut se = 0.0;
    let mut count = 0usize;
    for (qa, qb) in pa.iter().zip(pb.iter()) {
        for (x, y) in qa.iter().zip(qb.iter()) {
            let d = x - y;
            se += d * d;
        }
        count += qa.len();
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(10.0 * (255.0 * 255.0 / mse).log10())
    }
}

fn gaussian_window_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Valid-mode separable filtering with a 1-D window along both axes.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * plane[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window_1d(SSIM_WINDOW, SSIM_SIGMA);
    let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_a2 = filter_valid(&a2, h, w, &win);
    let e_b2 = filter_valid(&b2, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let v = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        acc += v;
    }
    acc / mu_a.len() as f64
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) and the
/// reference constants C1 = (0.01*255)^2, C2 = (0.03*255)^2. RGB mode scores
/// each channel and averages.
pub fn ssim<E: Element>(a: &Tensor<E>, b: &Tensor<E>, protocol: &EvalProtocol) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DrnError::InvalidArgument(format!(
            "ssim: shape {:?} does not match shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, h, w) = protocol_planes(a, protocol)?;
    let (pb, _, _) = protocol_planes(b, protocol)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DrnError::InvalidArgument(format!(
            "ssim: shaved image ({h}, {w}) is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let mut acc = 0.0;
    for (qa, qb) in pa.iter().zip(pb.iter()) {
        acc += ssim_plane(qa, qb, h, w);
    }
    Ok(acc / pa.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Files present on only one side, or pairs that failed to score.
    pub errors: Vec<String>,
}

impl EvalReport {
    /// Machine-readable CSV: `image,psnr_db,ssim` with a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.4},{:.5}\n", row.name, row.psnr_db, row.ssim));
        }
        out.push_str(&format!("mean,{:.4},{:.5}\n", self.mean_psnr, self.mean_ssim));
        out
    }

    /// Aligned plain-text table with the protocol recorded in the header.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut out = format!("protocol: {}\n", self.protocol.describe());
        out.push_str(&format!("{:<name_w$}  {:>9}  {:>7}\n", "image", "psnr_db", "ssim"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>9.4}  {:>7.5}\n",
                row.name, row.psnr_db, row.ssim
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>9.4}  {:>7.5}\n",
            "mean", self.mean_psnr, self.mean_ssim
        ));
        if !self.errors.is_empty() {
            out.push_str("errors:\n");
            for e in &self.errors {
                out.push_str(&format!("  {e}\n"));
            }
        }
        out
    }
}

/// Scores a directory of outputs against a reference directory, matched by
/// filename. Missing counterparts are listed under errors and excluded from
/// the mean; an empty intersection is an error.
pub fn evaluate_dirs(out_dir: &Path, ref_dir: &Path, protocol: &EvalProtocol) -> Result<EvalReport> {
    let out_files = crate::degrade::list_pngs(out_dir)?;
    let ref_files = crate::degrade::list_pngs(ref_dir)?;
    let file_name = |p: &std::path::PathBuf| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let out_names: Vec<String> = out_files.iter().map(file_name).collect();
    let ref_names: Vec<String> = ref_files.iter().map(file_name).collect();

    let mut errors = Vec::new();
    for name in &out_names {
        if !ref_names.contains(name) {
            errors.push(format!("{name}: missing reference counterpart"));
        }
    }
    for name in &ref_names {
        if !out_names.contains(name) {
            errors.push(format!("{name}: missing output counterpart"));
        }
    }

    let mut rows = Vec::new();
    for name in out_names.iter().filter(|n| ref_names.contains(n)) {
        let result = (|| -> Result<EvalRow> {
            let a = crate::io::png::png_read(&out_dir.join(name))?;
            let b = crate::io::png::png_read(&ref_dir.join(name))?;
            Ok(EvalRow {
                name: name.clone(),
                psnr_db: psnr(&a, &b, protocol)?,
                ssim: ssim(&a, &b, protocol)?,
            })
        })();
        match result {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    if rows.is_empty() {
        return Err(DrnError::InvalidArgument(format!(
            "no scoreable image pairs between {} and {}",
            out_dir.display(),
            ref_dir.display()
        )));
    }
    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        protocol: *protocol,
        rows,
        mean_psnr,
        mean_ssim,
        errors,
    })
}
