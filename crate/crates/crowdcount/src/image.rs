//! Grayscale image helpers.
//!
//! Images travel through the pipeline as (1, H, W) tensors with values in
//! [0, 1]. On disk they are binary 8-bit PGM (P5).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gauss, Tensor};

pub fn image_dims<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::shape("image", "(1, H, W)", format!("{other:?}"))),
    }
}

/// Bilinear resample to (h_out, w_out) using the pixel-center convention.
pub fn resize_bilinear<S: Scalar>(img: &Tensor<S>, h_out: usize, w_out: usize) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::invalid("resize_bilinear: zero output size"));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(h_out * w_out);
    let sy = h as f64 / h_out as f64;
    let sx = w as f64 / w_out as f64;
    for oy in 0..h_out {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..w_out {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v00 = src[y0 * w + x0].to_f64();
            let v01 = src[y0 * w + x1].to_f64();
            let v10 = src[y1 * w + x0].to_f64();
            let v11 = src[y1 * w + x1].to_f64();
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out.push(S::from_f64(top + (bot - top) * ty));
        }
    }
    Tensor::from_vec(&[1, h_out, w_out], out)
}

pub fn hflip<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(src[y * w + (w - 1 - x)]);
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

/// Additive Gaussian pixel noise, clamped back into [0, 1].
pub fn add_noise<S: Scalar>(img: &Tensor<S>, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    let data = img
        .data()
        .iter()
        .map(|v| S::from_f64((v.to_f64() + gauss(rng) * std).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Crop a (h, w) window whose top-left corner is (y0, x0).
pub fn crop<S: Scalar>(
    img: &Tensor<S>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let (ih, iw) = image_dims(img)?;
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::shape(
            "crop",
            format!("window within {ih}x{iw}"),
            format!("{h}x{w}+{y0}+{x0}"),
        ));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        out.extend_from_slice(&src[y * iw + x0..y * iw + x0 + w]);
    }
    Tensor::from_vec(&[1, h, w], out)
}

// ---- PGM (P5, 8-bit) ---------------------------------------------------------

/// Write values scaled from [0, 1] to 0..=255 (values are clamped first).
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write an arbitrary non-negative map scaled so its maximum lands on 255
/// (identically zero maps come out black).
pub fn write_pgm_scaled(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = image_dims(map)?;
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    if max > 0.0 {
        bytes.extend(map.data().iter().map(|v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8));
    } else {
        bytes.extend(std::iter::repeat(0u8).take(h * w));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    parse_pgm(&bytes).map_err(|reason| Error::format(p, reason))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    // header: magic, width, height, maxval as whitespace-separated tokens
    // (# comments allowed), then a single whitespace byte before raster data
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(bytes)? != "P5" {
        return Err("not a binary PGM (expected magic 'P5')".into());
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (expected 255)"));
    }
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    pos += 1; // single whitespace after maxval
    let need = w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos))
    })?;
    let data = raster.iter().map(|b| *b as f32 / 255.0).collect();
    Tensor::from_vec(&[1, h, w], data).map_err(|e| e.to_string())
}
