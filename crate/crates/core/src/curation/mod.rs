//! Image admission: resolution, oversize and aesthetic filters, plus
//! perceptual-hash near-duplicate removal.

mod dedup;
mod phash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ImageRecord;

pub use dedup::{band_layout, dedup, near_pairs, Dedup, UnionFind};
pub use phash::{hamming, phash64, phash_luma, resize_bilinear, to_luma, HASH_SIDE};

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("record {0:?} has no perceptual hash")]
    MissingHash(String),
    #[error("image too small for hashing: {width}x{height}")]
    TooSmall { width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub min_aesthetic: f64,
    pub min_side: u32,
    pub max_long_edge: u32,
    pub max_short_edge: u32,
    pub max_hamming: u32,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            min_aesthetic: 5.75,
            min_side: 1024,
            max_long_edge: 6144,
            max_short_edge: 4096,
            max_hamming: 10,
        }
    }
}

impl CurationConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.min_side <= self.max_short_edge && self.max_short_edge <= self.max_long_edge) {
            return Err(format!(
                "curation: need min_side <= max_short_edge <= max_long_edge, got {} / {} / {}",
                self.min_side, self.max_short_edge, self.max_long_edge
            ));
        }
        if self.max_hamming > 64 {
            return Err(format!("curation: max_hamming {} > 64", self.max_hamming));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailReason {
    Resolution,
    Oversize,
    Aesthetic,
    Unscored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail(FailReason),
}

/// Applies resolution, oversize and aesthetic checks in that order and
/// reports the first failure.
pub fn passes_filters(record: &ImageRecord, cfg: &CurationConfig) -> Verdict {
    let short = record.width.min(record.height);
    let long = record.width.max(record.height);
    if short < cfg.min_side {
        return Verdict::Fail(FailReason::Resolution);
    }
    if long > cfg.max_long_edge || short > cfg.max_short_edge {
        return Verdict::Fail(FailReason::Oversize);
    }
    match record.aesthetic {
        None => Verdict::Fail(FailReason::Unscored),
        Some(a) if a < cfg.min_aesthetic => Verdict::Fail(FailReason::Aesthetic),
        Some(_) => Verdict::Pass,
    }
}
