//! Layered, penalty-weighted selection of fused candidates.
//!
//! Each layer is a set of boxes with bounded pairwise overlap. Draws are
//! weight-proportional without replacement; weights are recomputed after
//! every pick so that overlap with earlier picks, repeated captions, distance
//! from the image centre, tiny boxes and over-represented detectors all
//! lower a candidate's chance.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{fnv1a64, DetBox, Instance, InstanceStatus};
use crate::geometry::{area_fraction, center_distance_norm, iou};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    /// Stop at `min(per_image_cap, max(1, round(retention_target * N)))`.
    #[default]
    Retention,
    /// Stop only at `per_image_cap` (or when layers run out).
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub layers: u32,
    pub layer_iou_max: f64,
    pub per_image_cap: usize,
    pub retention_target: f64,
    pub stop_mode: StopMode,
    /// Overlap penalty against everything sampled so far.
    pub alpha: f64,
    /// Per-repeat caption factor.
    pub beta: f64,
    /// Centre-distance penalty.
    pub gamma: f64,
    /// Area fraction below which boxes are penalized.
    pub tau: f64,
    /// Lower clamp of the small-area factor.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            layers: 5,
            layer_iou_max: 0.3,
            per_image_cap: 64,
            retention_target: 0.30,
            stop_mode: StopMode::Retention,
            alpha: 2.0,
            beta: 0.5,
            gamma: 1.0,
            tau: 0.005,
            epsilon: 0.05,
            seed: 0,
        }
    }
}

impl ResampleConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("resample.layers must be >= 1".into());
        }
        if !(self.layer_iou_max > 0.0 && self.layer_iou_max < 1.0) {
            return Err("resample.layer_iou_max must lie in (0,1)".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) || !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err("resample.beta and resample.epsilon must lie in (0,1]".into());
        }
        if self.per_image_cap == 0 {
            return Err("resample.per_image_cap must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.retention_target) {
            return Err("resample.retention_target must lie in [0,1]".into());
        }
        if self.alpha < 0.0 || self.gamma < 0.0 || self.tau < 0.0 {
            return Err("resample.alpha, gamma and tau must be >= 0".into());
        }
        Ok(())
    }

    /// Maximum number of selections for an image with `n` candidates.
    pub fn budget(&self, n: usize) -> usize {
        match self.stop_mode {
            StopMode::Cap => self.per_image_cap,
            StopMode::Retention => {
                let r = ((self.retention_target * n as f64).round() as usize).max(1);
                r.min(self.per_image_cap)
            }
        }
    }
}

/// Unnormalized selection weight of `candidate` given the picks so far.
///
/// `detector_share` maps detector id to its fraction of `sampled`;
/// `n_detectors` is the number of distinct detectors among the image's
/// candidates.
#[allow(clippy::too_many_arguments)]
pub fn sampling_weight(
    candidate: &DetBox,
    sampled: &[&DetBox],
    counts: &HashMap<String, u32>,
    detector_share: &HashMap<String, f64>,
    n_detectors: usize,
    width: u32,
    height: u32,
    cfg: &ResampleConfig,
) -> f64 {
    let (w, h) = (f64::from(width), f64::from(height));
    let share = detector_share.get(&candidate.detector).copied().unwrap_or(0.0);
    let w_det = 1.0 / (1.0 + share * n_detectors as f64);
    let max_iou = sampled.iter().map(|s| iou(&candidate.bbox, &s.bbox)).fold(0.0, f64::max);
    let overlap = (-cfg.alpha * max_iou).exp();
    let repeats = counts.get(&candidate.category).copied().unwrap_or(0);
    let duplicate = cfg.beta.powi(repeats as i32);
    let center = (-cfg.gamma * center_distance_norm(&candidate.bbox, w, h)).exp();
    let area =
        if cfg.tau > 0.0 { (area_fraction(&candidate.bbox, w, h) / cfg.tau).clamp(cfg.epsilon, 1.0) } else { 1.0 };
    w_det * overlap * duplicate * center * area
}

/// Per-image generator: independent of record order and worker count.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(image_id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

/// One weight-proportional draw by exponential keys: every eligible item
/// gets `-ln(u) / w` and the smallest key wins. Consumes exactly one uniform
/// per entry of `weights`, eligible or not, so the stream position depends
/// only on the number of candidates.
pub fn draw_exponential<R: Rng + ?Sized>(weights: &[Option<f64>], rng: &mut R) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, w) in weights.iter().enumerate() {
        let u: f64 = 1.0 - rng.random::<f64>();
        let Some(w) = *w else { continue };
        if w <= 0.0 {
            continue;
        }
        let key = -u.ln() / w;
        if best.is_none_or(|(k, _)| key < k) {
            best = Some((key, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Selects up to `budget` instances into at most `cfg.layers` layers. The
/// returned list has the input order; picked instances become `resampled`
/// with their layer index, the rest stay `candidate`.
pub fn resample_image(
    instances: &[Instance],
    width: u32,
    height: u32,
    image_id: &str,
    cfg: &ResampleConfig,
) -> Vec<Instance> {
    let mut out = instances.to_vec();
    let pool: Vec<usize> = (0..instances.len()).filter(|&i| instances[i].status == InstanceStatus::Candidate).collect();
    if pool.is_empty() {
        return out;
    }
    let budget = cfg.budget(pool.len());
    let n_detectors = pool.iter().map(|&i| instances[i].det.detector.as_str()).collect::<BTreeSet<_>>().len();
    let mut rng = image_rng(cfg.seed, image_id);

    let mut taken = vec![false; instances.len()];
    let mut sampled: Vec<&DetBox> = Vec::new();
    let mut counts: HashMap<String, u32> = HashMap::new();
    let mut per_detector: HashMap<String, u32> = HashMap::new();

    'layers: for layer in 0..cfg.layers {
        let mut in_layer: Vec<usize> = Vec::new();
        loop {
            if sampled.len() >= budget {
                break 'layers;
            }
            let total = sampled.len().max(1) as f64;
            let share: HashMap<String, f64> =
                per_detector.iter().map(|(k, v)| (k.clone(), f64::from(*v) / total)).collect();
            let weights: Vec<Option<f64>> = pool
                .iter()
                .map(|&i| {
                    let c = &instances[i].det;
                    let eligible = !taken[i]
                        && in_layer.iter().all(|&j| iou(&c.bbox, &instances[j].det.bbox) <= cfg.layer_iou_max);
                    eligible.then(|| sampling_weight(c, &sampled, &counts, &share, n_detectors, width, height, cfg))
                })
                .collect();
            let Some(pick) = draw_exponential(&weights, &mut rng) else { break };
            let i = pool[pick];
            taken[i] = true;
            in_layer.push(i);
            let det = &instances[i].det;
            sampled.push(det);
            *counts.entry(det.category.clone()).or_default() += 1;
            *per_detector.entry(det.detector.clone()).or_default() += 1;
            out[i].status = InstanceStatus::Resampled;
            out[i].layer = Some(layer);
        }
    }
    out
}
