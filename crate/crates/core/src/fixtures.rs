//! Seeded synthetic data for tests, benches and demos.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    write_manifest, CategorySet, DetBox, ImageRecord, Instance, InstanceStatus, ManifestError, PHash,
};
use crate::geometry::BBox;

pub const ENSEMBLE: [&str; 4] = ["gd", "yw", "ow", "od"];

const NOUNS: &[&str] = &[
    "dog", "cat", "chair", "table", "lamp", "vase", "book", "cup", "bicycle", "bench", "umbrella", "plant", "clock",
    "bottle", "pillow", "window", "door", "car", "bag", "hat", "shoe", "kite", "bird", "horse", "boat", "mirror",
];
const ADJECTIVES: &[&str] = &["red", "small", "wooden", "old", "striped", "metal", "white", "round"];

/// A crowded scene: `objects` well separated objects, each annotated several
/// times by different detectors under different labels, so boxes of one
/// object overlap heavily while distinct objects barely touch. Same-label
/// boxes never overlap beyond typical suppression thresholds.
pub fn dense_scene(seed: u64, objects: usize, boxes: usize) -> (Vec<DetBox>, u32, u32) {
    assert!(objects > 0 && boxes >= objects, "need at least one box per object");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (objects as f64).sqrt().ceil() as usize;
    let rows = objects.div_ceil(cols);
    let (cell_w, cell_h) = (160.0, 140.0);
    let (width, height) = ((cols as f64 * cell_w) as u32, (rows as f64 * cell_h) as u32);

    let mut per_object = vec![1usize; objects];
    for _ in objects..boxes {
        per_object[rng.random_range(0..objects)] += 1;
    }
    let mut out = Vec::with_capacity(boxes);
    for (k, &n) in per_object.iter().enumerate() {
        let (cx, cy) = ((k % cols) as f64 * cell_w + cell_w / 2.0, (k / cols) as f64 * cell_h + cell_h / 2.0);
        let (bw, bh) = (rng.random_range(70.0..110.0), rng.random_range(60.0..100.0));
        let noun = NOUNS[k % NOUNS.len()];
        for j in 0..n {
            let (jx, jy) = (rng.random_range(-0.06..0.06) * bw, rng.random_range(-0.06..0.06) * bh);
            let s = rng.random_range(0.9..1.1);
            let bbox = BBox::new(
                cx + jx - s * bw / 2.0,
                cy + jy - s * bh / 2.0,
                cx + jx + s * bw / 2.0,
                cy + jy + s * bh / 2.0,
            );
            // Unique label per box of an object: a bare noun, then qualified ones.
            let label = match j {
                0 => format!("{noun} {k}"),
                j => {
                    format!("{} {noun} {k}", ADJECTIVES[(j - 1) % ADJECTIVES.len()])
                        + &"'".repeat((j - 1) / ADJECTIVES.len())
                }
            };
            let detector = ENSEMBLE[rng.random_range(0..ENSEMBLE.len())];
            let score = (rng.random_range(0.2..0.95f64) * 100.0).round() / 100.0;
            out.push(DetBox::new(bbox, label, score, detector));
        }
    }
    (out, width, height)
}

/// Candidate instances for [`dense_scene`].
pub fn dense_instances(seed: u64, objects: usize, boxes: usize) -> (Vec<Instance>, u32, u32) {
    let (b, w, h) = dense_scene(seed, objects, boxes);
    (b.into_iter().map(Instance::candidate).collect(), w, h)
}

fn hash_record(i: usize, hash: u64, aesthetic: f64) -> ImageRecord {
    let mut r = ImageRecord::new(format!("h{i:04}"), format!("file:///h{i:04}.png"), 1024, 1024);
    r.phash = Some(PHash(hash));
    r.aesthetic = Some(aesthetic);
    r
}

fn flip_bits<R: Rng>(h: u64, bits: u32, rng: &mut R) -> u64 {
    let mut out = h;
    let mut flipped = 0;
    while flipped < bits {
        let b = 1u64 << rng.random_range(0..64);
        if (out ^ h) & b == 0 {
            out ^= b;
            flipped += 1;
        }
    }
    out
}

/// Random hashes clustered around a few centres, with coarse aesthetic
/// scores so ties occur.
pub fn random_hash_set(seed: u64, n: usize) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<u64> = (0..(n / 8).max(1)).map(|_| rng.random()).collect();
    (0..n)
        .map(|i| {
            let c = centres[rng.random_range(0..centres.len())];
            let h = if rng.random_bool(0.2) { rng.random() } else { flip_bits(c, rng.random_range(0..14), &mut rng) };
            hash_record(i, h, f64::from(rng.random_range(10..14u8)) / 2.0)
        })
        .collect()
}

/// Chains whose neighbours sit `step` bits apart while the ends drift far
/// apart, so only transitive closure joins them.
pub fn chain_hash_set(seed: u64, chains: usize, length: usize, step: u32) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..chains {
        let mut h: u64 = rng.random();
        for _ in 0..length {
            out.push(hash_record(out.len(), h, f64::from(rng.random_range(10..14u8)) / 2.0));
            h = flip_bits(h, step, &mut rng);
        }
    }
    out
}

fn blocky_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    let grid: Vec<[u8; 3]> = (0..36).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    RgbImage::from_fn(w, h, |x, y| Rgb(grid[((y * 6 / h) * 6 + x * 6 / w) as usize]))
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

/// Writes `n` small PNGs plus a source manifest into `dir` and returns the
/// manifest path. Record `n-1` is a brightened copy of record 3 and record 5
/// carries a low aesthetic score, so curation has something to remove.
pub fn write_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf, ManifestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| ManifestError::Io { path: images_dir.clone(), source: e })?;
    let mut images: Vec<RgbImage> = Vec::new();
    let mut records = Vec::new();
    for i in 0..n {
        let img = if i + 1 == n && n > 4 {
            let mut copy = images[3].clone();
            copy.pixels_mut().for_each(|p| p.0 = p.0.map(|c| c.saturating_add(6)));
            copy
        } else {
            let (w, h) = (rng.random_range(96..=200), rng.random_range(96..=200));
            blocky_image(&mut rng, w, h)
        };
        let name = format!("img-{i:03}.png");
        let path = images_dir.join(&name);
        std::fs::write(&path, png_bytes(&img)).map_err(|e| ManifestError::Io { path: path.clone(), source: e })?;
        let mut r = ImageRecord::new(format!("img-{i:03}"), format!("images/{name}"), img.width(), img.height());
        r.aesthetic = Some(if i == 5 { 4.5 } else { 6.0 + f64::from(i as u32 % 7) * 0.25 });
        r.web_caption = ["Gypsy caravan", "sale! best price", "", "my holiday", "Cockatoo"][i % 5].to_string();
        records.push(r);
        images.push(img);
    }
    let manifest = dir.join("source.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}

/// Pipeline configuration text for a corpus written by [`write_corpus`]
/// against a mock service at `base_url`.
pub fn mock_config_toml(workdir: &Path, input: &Path, base_url: &str, seed: u64) -> String {
    let q = |p: &Path| toml::Value::String(p.display().to_string()).to_string();
    let mut s = format!(
        "workdir = {}\ninput = {}\nseed = {seed}\nworkers = 4\n\n[curation]\nmin_side = 64\n\n",
        q(workdir),
        q(input)
    );
    for id in ["vlm", "llm", "verifier"] {
        s += &format!(
            "[backends.{id}]\nkind = \"chat\"\nendpoint = \"{base_url}/v1/chat/completions\"\nmodel_name = \"mock-{id}\"\nbackoff_base = 0.01\n\n"
        );
    }
    for id in ENSEMBLE {
        s += &format!(
            "[backends.{id}]\nkind = \"detector\"\nendpoint = \"{base_url}/v1/detect/{id}\"\nmodel_name = \"mock-{id}\"\nbackoff_base = 0.01\n\n"
        );
    }
    s += &format!("[backends.scorer]\nkind = \"scorer\"\nendpoint = \"{base_url}/v1/score\"\nbackoff_base = 0.01\n\n");
    for id in ENSEMBLE {
        s += &format!("[[detect.detectors]]\nid = \"{id}\"\nthreshold = 0.2\n\n");
    }
    s
}

/// Verified-instance records where each detector contributes exactly
/// `counts[i]` boxes, spread over `images` images.
pub fn detector_share_records(counts: &[(&str, usize)], images: usize) -> Vec<ImageRecord> {
    let mut records: Vec<ImageRecord> = (0..images)
        .map(|i| {
            let mut r = ImageRecord::new(format!("s{i:03}"), format!("file:///s{i:03}.png"), 640, 480);
            r.categories = Some(CategorySet::default());
            r.instances = Some(Vec::new());
            r
        })
        .collect();
    let mut k = 0usize;
    for (det, n) in counts {
        for _ in 0..*n {
            let r = &mut records[k % images];
            let slot = r.instances.as_ref().map_or(0, Vec::len);
            let cat = format!("thing{}", slot % 7);
            let cats = r.categories.as_mut().expect("set above");
            if !cats.merged.contains(&cat) {
                cats.merged.push(cat.clone());
            }
            let x = f64::from((slot % 10) as u32) * 60.0;
            let y = f64::from((slot / 10 % 8) as u32) * 55.0;
            let mut inst = Instance::candidate(DetBox::new(BBox::new(x, y, x + 40.0, y + 40.0), cat, 0.5, *det));
            inst.status = InstanceStatus::Verified;
            inst.layer = Some((slot / 80) as u32);
            inst.p_yes = Some(0.9);
            inst.p_no = Some(0.05);
            r.instances.as_mut().expect("set above").push(inst);
            k += 1;
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, nms_per_category};

    #[test]
    fn dense_scene_has_requested_size_and_survives_nms() {
        let (boxes, w, h) = dense_scene(3, 25, 107);
        assert_eq!(boxes.len(), 107);
        assert!(boxes.iter().all(|b| b.bbox.within(f64::from(w), f64::from(h))));
        assert_eq!(nms_per_category(&boxes, 0.4).len(), 107);
        let heavy =
            boxes.iter().enumerate().flat_map(|(i, a)| boxes[i + 1..].iter().map(move |b| iou(&a.bbox, &b.bbox)));
        assert!(heavy.filter(|&v| v > 0.3).count() > 50);
    }

    #[test]
    fn chain_neighbours_are_close() {
        let set = chain_hash_set(1, 2, 10, 8);
        let h = |i: usize| set[i].phash.unwrap().0;
        assert!((0..9).all(|i| (h(i) ^ h(i + 1)).count_ones() == 8));
        assert!((h(0) ^ h(9)).count_ones() > 10);
    }

    #[test]
    fn share_records_count_exactly() {
        let recs = detector_share_records(&[("gd", 5), ("yw", 3)], 2);
        let n: usize = recs.iter().map(|r| r.instances.as_ref().unwrap().len()).sum();
        assert_eq!(n, 8);
        assert!(recs.iter().all(|r| r.validate().is_ok()));
    }
}
