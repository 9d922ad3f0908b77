//! Per-instance verification: crop, ask a one-token yes/no question, sum the
//! probability mass of all yes and no spellings and gate on their ratio.

use std::collections::BTreeSet;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::InstanceStatus;
use crate::gateway::{ChatRequest, Message, Part, TokenAlternative};
use crate::geometry::BBox;
use crate::recaption::PromptTemplates;

pub const TOP_ALTERNATIVES: u32 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum CrosscheckError {
    #[error("crop region of {0:?} is degenerate after clamping")]
    DegenerateBox(BBox),
    #[error("empty caption")]
    EmptyCaption,
    #[error("png encoding failed: {0}")]
    Encode(String),
}

fn case_variants(word: &str) -> Vec<String> {
    let n = word.chars().count();
    let mut out = BTreeSet::new();
    for mask in 0u32..(1 << n) {
        let v: String = word
            .chars()
            .enumerate()
            .map(|(i, c)| if mask & (1 << i) != 0 { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
            .collect();
        out.insert(format!(" {v}"));
        out.insert(v);
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrosscheckConfig {
    pub margin: f64,
    pub min_crop_side: u32,
    pub keep_ratio: f64,
    pub min_mass: f64,
    pub yes_variants: Vec<String>,
    pub no_variants: Vec<String>,
    /// Strip surrounding whitespace and punctuation before matching, so that
    /// "Yes." and "\nno" count.
    pub normalize_tokens: bool,
}

impl Default for CrosscheckConfig {
    fn default() -> Self {
        CrosscheckConfig {
            margin: 0.10,
            min_crop_side: 224,
            keep_ratio: 0.75,
            min_mass: 0.5,
            yes_variants: case_variants("yes"),
            no_variants: case_variants("no"),
            normalize_tokens: true,
        }
    }
}

impl CrosscheckConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.keep_ratio > 0.5 && self.keep_ratio < 1.0) {
            return Err("crosscheck.keep_ratio must lie in (0.5, 1)".into());
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err("crosscheck.margin must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_mass) {
            return Err("crosscheck.min_mass must lie in [0,1]".into());
        }
        if self.min_crop_side == 0 {
            return Err("crosscheck.min_crop_side must be >= 1".into());
        }
        Ok(())
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of the expanded, clamped box.
pub fn crop_rect(bbox: &BBox, width: u32, height: u32, margin: f64) -> Result<(u32, u32, u32, u32), CrosscheckError> {
    let (mx, my) = (margin * bbox.width(), margin * bbox.height());
    let clamp = |v: f64, hi: u32| v.clamp(0.0, f64::from(hi)) as u32;
    let x0 = clamp((bbox.x1 - mx).floor(), width);
    let y0 = clamp((bbox.y1 - my).floor(), height);
    let x1 = clamp((bbox.x2 + mx).ceil(), width);
    let y1 = clamp((bbox.y2 + my).ceil(), height);
    if x1 <= x0 || y1 <= y0 {
        return Err(CrosscheckError::DegenerateBox(*bbox));
    }
    Ok((x0, y0, x1, y1))
}

/// Crops the expanded box and upscales it, keeping the aspect ratio, when
/// its shorter side is below `min_crop_side`.
pub fn crop_region(image: &RgbImage, bbox: &BBox, cfg: &CrosscheckConfig) -> Result<RgbImage, CrosscheckError> {
    let (x0, y0, x1, y1) = crop_rect(bbox, image.width(), image.height(), cfg.margin)?;
    let crop = imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
    let short = crop.width().min(crop.height());
    if short >= cfg.min_crop_side {
        return Ok(crop);
    }
    let scale = f64::from(cfg.min_crop_side) / f64::from(short);
    let (w, h) = if crop.width() <= crop.height() {
        (cfg.min_crop_side, ((f64::from(crop.height()) * scale).round() as u32).max(cfg.min_crop_side))
    } else {
        (((f64::from(crop.width()) * scale).round() as u32).max(cfg.min_crop_side), cfg.min_crop_side)
    };
    Ok(imageops::resize(&crop, w, h, imageops::FilterType::Triangle))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, CrosscheckError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| CrosscheckError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn build_verify_request(
    caption: &str,
    crop_png: &[u8],
    templates: &PromptTemplates,
) -> Result<ChatRequest, CrosscheckError> {
    if caption.trim().is_empty() {
        return Err(CrosscheckError::EmptyCaption);
    }
    let text = templates.verify.fill(&[("caption", caption)]);
    let mut req = ChatRequest::new(
        vec![Message::user(vec![Part::Image { mime: "image/png".into(), data: crop_png.to_vec() }, Part::Text(text)])],
        1,
    );
    req.logprobs = true;
    req.top_logprobs = Some(TOP_ALTERNATIVES);
    Ok(req)
}

fn normalize_token(token: &str, strip: bool) -> String {
    if strip {
        token.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation()).to_string()
    } else {
        token.to_string()
    }
}

/// Sums `exp(logprob)` over the yes and no spellings; no renormalization.
pub fn aggregate_yes_no(alternatives: &[TokenAlternative], cfg: &CrosscheckConfig) -> (f64, f64) {
    let norm = |s: &str| normalize_token(s, cfg.normalize_tokens);
    let yes: BTreeSet<String> = cfg.yes_variants.iter().map(|v| norm(v)).collect();
    let no: BTreeSet<String> = cfg.no_variants.iter().map(|v| norm(v)).collect();
    let (mut p_yes, mut p_no) = (0.0, 0.0);
    for alt in alternatives {
        let t = norm(&alt.token);
        if yes.contains(&t) {
            p_yes += alt.logprob.exp();
        } else if no.contains(&t) {
            p_no += alt.logprob.exp();
        }
    }
    (p_yes.min(1.0), p_no.min(1.0))
}

pub fn verdict(p_yes: f64, p_no: f64, cfg: &CrosscheckConfig) -> InstanceStatus {
    let mass = p_yes + p_no;
    if mass < cfg.min_mass || mass <= 0.0 {
        InstanceStatus::Indeterminate
    } else if p_yes / mass >= cfg.keep_ratio {
        InstanceStatus::Verified
    } else {
        InstanceStatus::Rejected
    }
}
