//! Dataset-level and per-detector statistics over a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{read_manifest, ImageRecord, Instance, InstanceStatus, ManifestError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("manifest has no usable records")]
    Empty,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Which instances count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusFilter {
    #[default]
    Verified,
    /// Everything that survived resampling, whatever the cross-check said.
    Resampled,
    All,
}

impl StatusFilter {
    pub fn admits(self, status: InstanceStatus) -> bool {
        match self {
            StatusFilter::Verified => status == InstanceStatus::Verified,
            StatusFilter::Resampled => status != InstanceStatus::Candidate,
            StatusFilter::All => true,
        }
    }
}

impl FromStr for StatusFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "verified" => Ok(StatusFilter::Verified),
            "resampled" => Ok(StatusFilter::Resampled),
            "all" => Ok(StatusFilter::All),
            _ => Err(format!("unknown status filter {s:?} (verified|resampled|all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    /// Records carrying a failure marker; excluded from everything else.
    pub failed: usize,
    pub instances: usize,
    pub distinct_categories: usize,
    pub avg_category: f64,
    pub avg_box: f64,
    pub avg_width: f64,
    pub avg_height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_aesthetic: Option<f64>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images               {}", self.images)?;
        if self.failed > 0 {
            writeln!(f, "failed (excluded)    {}", self.failed)?;
        }
        writeln!(f, "instances            {}", self.instances)?;
        writeln!(f, "distinct categories  {}", self.distinct_categories)?;
        writeln!(f, "avg categories/image {:.2}", self.avg_category)?;
        writeln!(f, "avg boxes/image      {:.2}", self.avg_box)?;
        writeln!(f, "avg resolution       {:.0}x{:.0}", self.avg_width, self.avg_height)?;
        match self.avg_aesthetic {
            Some(a) => writeln!(f, "avg aesthetic        {a:.2}"),
            None => writeln!(f, "avg aesthetic        n/a"),
        }
    }
}

/// Mergeable partial aggregate; shards can be accumulated independently.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    images: usize,
    failed: usize,
    instances: usize,
    per_image_categories: usize,
    width_sum: f64,
    height_sum: f64,
    aesthetic_sum: f64,
    aesthetic_n: usize,
    categories: BTreeSet<String>,
}

impl StatsAccumulator {
    pub fn add(&mut self, r: &ImageRecord, filter: StatusFilter) {
        if r.failed.is_some() {
            self.failed += 1;
            return;
        }
        self.images += 1;
        self.width_sum += f64::from(r.width);
        self.height_sum += f64::from(r.height);
        if let Some(a) = r.aesthetic {
            self.aesthetic_sum += a;
            self.aesthetic_n += 1;
        }
        let kept: Vec<&Instance> = filtered(r, filter).collect();
        self.instances += kept.len();
        let cats: BTreeSet<&str> = kept.iter().map(|i| i.det.category.as_str()).collect();
        self.per_image_categories += cats.len();
        self.categories.extend(cats.into_iter().map(String::from));
    }

    pub fn merge(&mut self, other: StatsAccumulator) {
        self.images += other.images;
        self.failed += other.failed;
        self.instances += other.instances;
        self.per_image_categories += other.per_image_categories;
        self.width_sum += other.width_sum;
        self.height_sum += other.height_sum;
        self.aesthetic_sum += other.aesthetic_sum;
        self.aesthetic_n += other.aesthetic_n;
        self.categories.extend(other.categories);
    }

    pub fn finish(self) -> Result<DatasetStats, StatsError> {
        if self.images == 0 {
            return Err(StatsError::Empty);
        }
        let n = self.images as f64;
        Ok(DatasetStats {
            images: self.images,
            failed: self.failed,
            instances: self.instances,
            distinct_categories: self.categories.len(),
            avg_category: self.per_image_categories as f64 / n,
            avg_box: self.instances as f64 / n,
            avg_width: self.width_sum / n,
            avg_height: self.height_sum / n,
            avg_aesthetic: (self.aesthetic_n > 0).then(|| self.aesthetic_sum / self.aesthetic_n as f64),
        })
    }
}

fn filtered(r: &ImageRecord, filter: StatusFilter) -> impl Iterator<Item = &Instance> {
    r.instances.iter().flatten().filter(move |i| filter.admits(i.status))
}

pub fn dataset_stats_of(records: &[ImageRecord], filter: StatusFilter) -> Result<DatasetStats, StatsError> {
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.add(r, filter);
    }
    acc.finish()
}

pub fn dataset_stats(manifest: &Path, filter: StatusFilter) -> Result<DatasetStats, StatsError> {
    dataset_stats_of(&read_manifest(manifest)?, filter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorStats {
    pub boxes: usize,
    pub box_contribution: f64,
    pub cat_coverage: f64,
    pub unique_cat: f64,
}

pub fn per_detector_stats_of(records: &[ImageRecord], filter: StatusFilter) -> BTreeMap<String, DetectorStats> {
    let mut boxes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut detectors_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.failed.is_none()) {
        for i in filtered(r, filter) {
            *boxes.entry(&i.det.detector).or_default() += 1;
            detectors_of.entry(&i.det.category).or_default().insert(&i.det.detector);
        }
    }
    let total: usize = boxes.values().sum();
    let global = detectors_of.len() as f64;
    boxes
        .iter()
        .map(|(&d, &n)| {
            let covered = detectors_of.values().filter(|s| s.contains(d)).count() as f64;
            let unique = detectors_of.values().filter(|s| s.len() == 1 && s.contains(d)).count() as f64;
            let stats = DetectorStats {
                boxes: n,
                box_contribution: n as f64 / total as f64,
                cat_coverage: covered / global,
                unique_cat: unique / global,
            };
            (d.to_string(), stats)
        })
        .collect()
}

pub fn per_detector_stats(
    manifest: &Path,
    filter: StatusFilter,
) -> Result<BTreeMap<String, DetectorStats>, StatsError> {
    Ok(per_detector_stats_of(&read_manifest(manifest)?, filter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::DetBox;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn verified(cat: &str, det: &str) -> Instance {
        let mut i = Instance::candidate(DetBox::new(BBox::new(0.0, 0.0, 1.0, 1.0), cat, 0.5, det));
        i.status = InstanceStatus::Verified;
        i
    }

    fn rec(id: &str, inst: Vec<Instance>) -> ImageRecord {
        let mut r = ImageRecord::new(id, format!("file:///{id}.png"), 100, 50);
        r.instances = Some(inst);
        r
    }

    #[test]
    fn two_image_hand_example() {
        let recs = vec![
            rec("a", vec![verified("cat", "gd"), verified("dog", "gd"), verified("cat", "yw")]),
            rec("b", vec![verified("cat", "gd")]),
        ];
        let s = dataset_stats_of(&recs, StatusFilter::Verified).unwrap();
        assert_eq!(s.distinct_categories, 2);
        assert_eq!(s.avg_category, 1.5);
        assert_eq!(s.avg_box, 2.0);
        assert_eq!((s.avg_width, s.avg_height), (100.0, 50.0));
        assert_eq!(s.avg_aesthetic, None);
    }

    #[test]
    fn empty_annotations_and_empty_manifest() {
        let s = dataset_stats_of(&[rec("a", vec![])], StatusFilter::Verified).unwrap();
        assert_eq!((s.avg_box, s.distinct_categories), (0.0, 0));
        assert!(matches!(dataset_stats_of(&[], StatusFilter::Verified), Err(StatsError::Empty)));
    }

    #[test]
    fn status_filter_switch() {
        let mut r = rec("a", vec![verified("cat", "gd")]);
        let mut rej = Instance::candidate(DetBox::new(BBox::new(0.0, 0.0, 1.0, 1.0), "dog", 0.5, "gd"));
        rej.status = InstanceStatus::Rejected;
        r.instances.as_mut().unwrap().push(rej.clone());
        rej.status = InstanceStatus::Candidate;
        r.instances.as_mut().unwrap().push(rej);
        let recs = [r];
        assert_eq!(dataset_stats_of(&recs, StatusFilter::Verified).unwrap().instances, 1);
        assert_eq!(dataset_stats_of(&recs, StatusFilter::Resampled).unwrap().instances, 2);
        assert_eq!(dataset_stats_of(&recs, StatusFilter::All).unwrap().instances, 3);
        assert!("bogus".parse::<StatusFilter>().is_err());
    }

    #[test]
    fn single_detector_is_degenerate() {
        let s = per_detector_stats_of(
            &[rec("a", vec![verified("cat", "gd"), verified("dog", "gd")])],
            StatusFilter::Verified,
        );
        assert_eq!(s["gd"], DetectorStats { boxes: 2, box_contribution: 1.0, cat_coverage: 1.0, unique_cat: 1.0 });
    }

    #[test]
    fn shared_category_is_not_unique() {
        let recs = [rec("a", vec![verified("cat", "gd"), verified("cat", "yw"), verified("dog", "yw")])];
        let s = per_detector_stats_of(&recs, StatusFilter::Verified);
        assert_eq!(s["gd"].cat_coverage, 0.5);
        assert_eq!(s["gd"].unique_cat, 0.0);
        assert_eq!(s["yw"].cat_coverage, 1.0);
        assert_eq!(s["yw"].unique_cat, 0.5);
    }

    fn arb_records() -> impl Strategy<Value = Vec<ImageRecord>> {
        prop::collection::vec(prop::collection::vec((0usize..5, 0usize..3), 0..6), 1..8).prop_map(|imgs| {
            imgs.into_iter()
                .enumerate()
                .map(|(k, insts)| {
                    rec(
                        &format!("r{k}"),
                        insts
                            .into_iter()
                            .map(|(c, d)| verified(["a", "b", "c", "d", "e"][c], ["gd", "yw", "ow"][d]))
                            .collect(),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn contributions_sum_to_one_and_unique_le_coverage(recs in arb_records()) {
            let s = per_detector_stats_of(&recs, StatusFilter::Verified);
            if !s.is_empty() {
                let total: f64 = s.values().map(|d| d.box_contribution).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
            }
            for d in s.values() {
                prop_assert!(d.unique_cat <= d.cat_coverage);
            }
        }

        #[test]
        fn permutation_and_shard_invariant(recs in arb_records(), split in 0usize..8) {
            let mut rev = recs.clone();
            rev.reverse();
            prop_assert_eq!(per_detector_stats_of(&recs, StatusFilter::Verified), per_detector_stats_of(&rev, StatusFilter::Verified));
            let whole = dataset_stats_of(&recs, StatusFilter::Verified).unwrap();
            let k = split.min(recs.len());
            let mut a = StatsAccumulator::default();
            let mut b = StatsAccumulator::default();
            recs[..k].iter().for_each(|r| a.add(r, StatusFilter::Verified));
            recs[k..].iter().for_each(|r| b.add(r, StatusFilter::Verified));
            a.merge(b);
            let merged = a.finish().unwrap();
            prop_assert_eq!(merged.instances, whole.instances);
            prop_assert_eq!(merged.distinct_categories, whole.distinct_categories);
            prop_assert!((merged.avg_category - whole.avg_category).abs() < 1e-12);
        }
    }
}
