//! 64-bit DCT perceptual hash.
//!
//! Recipe: luma (0.299R + 0.587G + 0.114B) → bilinear resize to 32×32 →
//! round to 8-bit gray → subtract the mean → unnormalized 2-D type-II DCT →
//! keep the 8×8 lowest frequencies. Coefficient `i = 8u + v` maps to bit
//! `63 - i`; the DC slot (bit 63) is always 0 and each AC bit is set iff the
//! coefficient exceeds the median of the 63 AC coefficients (element 31 of
//! the sorted list).
//!
//! Mean subtraction only moves the DC term, but it makes the AC terms of a
//! flat image exactly zero instead of cosine-sum rounding noise.

use std::f64::consts::PI;

use image::RgbImage;

use super::CurationError;

pub const HASH_SIDE: usize = 32;
const LOW: usize = 8;

/// Row-major luma plane.
pub fn to_luma(img: &RgbImage) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane =
        img.pixels().map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])).collect();
    (plane, w, h)
}

/// Separable triangle-filter resize. The kernel support widens with the
/// downscale factor, so large sources are area-averaged rather than aliased.
pub fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let horiz = resize_axis(src, sw, sh, dw, true);
    resize_axis(&horiz, dw, sh, dh, false)
}

fn axis_weights(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    let support = scale.max(1.0);
    (0..dst_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(src_len - 1);
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let w = 1.0 - (j as f64 - center).abs() / support;
                    (w > 0.0).then_some((j, w))
                })
                .collect();
            if taps.is_empty() {
                taps.push((center.round().clamp(0.0, (src_len - 1) as f64) as usize, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn resize_axis(src: &[f64], w: usize, h: usize, dst_len: usize, horizontal: bool) -> Vec<f64> {
    if horizontal {
        let weights = axis_weights(w, dst_len);
        let mut out = vec![0.0; dst_len * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, taps) in weights.iter().enumerate() {
                out[y * dst_len + x] = taps.iter().map(|&(j, wt)| row[j] * wt).sum();
            }
        }
        out
    } else {
        let weights = axis_weights(h, dst_len);
        let mut out = vec![0.0; w * dst_len];
        for (y, taps) in weights.iter().enumerate() {
            for x in 0..w {
                out[y * w + x] = taps.iter().map(|&(j, wt)| src[j * w + x] * wt).sum();
            }
        }
        out
    }
}

/// Hash of an image.
pub fn phash64(img: &RgbImage) -> Result<u64, CurationError> {
    let (luma, w, h) = to_luma(img);
    if w == 0 || h == 0 {
        return Err(CurationError::TooSmall { width: img.width(), height: img.height() });
    }
    Ok(phash_luma(&luma, w, h))
}

/// Hash of a row-major luma plane.
pub fn phash_luma(luma: &[f64], w: usize, h: usize) -> u64 {
    let small = resize_bilinear(luma, w, h, HASH_SIDE, HASH_SIDE);
    let mut gray: Vec<f64> = small.iter().map(|v| v.round().clamp(0.0, 255.0)).collect();
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    gray.iter_mut().for_each(|v| *v -= mean);

    let coeffs = dct_low(&gray);
    let mut ac: Vec<f64> = coeffs[1..].to_vec();
    ac.sort_by(f64::total_cmp);
    let median = ac[ac.len() / 2];

    coeffs.iter().enumerate().skip(1).filter(|(_, &c)| c > median).fold(0u64, |hash, (i, _)| hash | (1u64 << (63 - i)))
}

/// The 8×8 lowest-frequency coefficients of the unnormalized 2-D DCT-II,
/// row-major in (vertical, horizontal) frequency.
fn dct_low(block: &[f64]) -> [f64; LOW * LOW] {
    let n = HASH_SIDE;
    let cos: Vec<f64> =
        (0..LOW).flat_map(|k| (0..n).map(move |x| (PI / n as f64 * (x as f64 + 0.5) * k as f64).cos())).collect();
    // rows: horizontal frequency v for each y
    let mut rows = vec![0.0; n * LOW];
    for y in 0..n {
        for v in 0..LOW {
            rows[y * LOW + v] = (0..n).map(|x| block[y * n + x] * cos[v * n + x]).sum();
        }
    }
    let mut out = [0.0; LOW * LOW];
    for u in 0..LOW {
        for v in 0..LOW {
            out[u * LOW + v] = (0..n).map(|y| rows[y * LOW + v] * cos[u * n + y]).sum();
        }
    }
    out
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}
