//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero if any fails.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rovi_core::crosscheck::{aggregate_yes_no, verdict, CrosscheckConfig};
use rovi_core::curation::dedup;
use rovi_core::datamodel::{DetBox, Failure, ImageRecord, Instance, InstanceStatus, Stage};
use rovi_core::fixtures::{
    chain_hash_set, dense_instances, detector_share_records, mock_config_toml, random_hash_set, write_corpus,
};
use rovi_core::gateway::mock::{serve_mocks, MockFixtures};
use rovi_core::gateway::TokenAlternative;
use rovi_core::geometry::{nms_per_category, BBox};
use rovi_core::pipeline::{Pipeline, PipelineConfig, RunOptions};
use rovi_core::recaption::{merge_categories, postprocess_description, NegativeFilter, RecaptionConfig};
use rovi_core::resample::{resample_image, ResampleConfig};
use rovi_core::stats::{dataset_stats_of, per_detector_stats_of, StatusFilter};

/// Pinned tolerances.
const NMS_THRESHOLD: f64 = 0.4;
const NMS_BUDGET: Duration = Duration::from_secs(10);
const DEDUP_HAMMING: u32 = 10;
const RETENTION_RANGE: (f64, f64) = (0.20, 0.40);
const MAX_LAYERS: u32 = 5;
const PROB_TOL: f64 = 1e-12;
const SHARE_TOL: f64 = 1e-9;
const GOLDEN_BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- criterion 1

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// True when `a` is preferred to `b`: higher score, then smaller x1, y1,
/// detector, x2, y2.
fn oracle_before(a: &DetBox, b: &DetBox) -> bool {
    let ka = (-a.score, a.bbox.x1, a.bbox.y1, &a.detector, a.bbox.x2, a.bbox.y2);
    let kb = (-b.score, b.bbox.x1, b.bbox.y1, &b.detector, b.bbox.x2, b.bbox.y2);
    ka.partial_cmp(&kb) == Some(std::cmp::Ordering::Less)
}

/// Repeatedly keep the best remaining box and delete everything it overlaps.
fn oracle_nms(boxes: &[DetBox], t: f64) -> Vec<DetBox> {
    let mut cats: Vec<&str> = boxes.iter().map(|b| b.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut out = Vec::new();
    for cat in cats {
        let mut alive: Vec<&DetBox> = boxes.iter().filter(|b| b.category == cat).collect();
        while !alive.is_empty() {
            let mut best = 0;
            for i in 1..alive.len() {
                if oracle_before(alive[i], alive[best]) {
                    best = i;
                }
            }
            let keep = alive.swap_remove(best);
            alive.retain(|b| oracle_iou(&keep.bbox, &b.bbox) <= t);
            out.push(keep.clone());
        }
    }
    out
}

fn random_boxes(rng: &mut ChaCha8Rng) -> Vec<DetBox> {
    let n = rng.random_range(0..=50);
    let mut out: Vec<DetBox> = Vec::with_capacity(n);
    for _ in 0..n {
        // Occasionally copy an earlier box exactly, to exercise tie-breaking.
        if !out.is_empty() && rng.random_bool(0.1) {
            let mut b = out[rng.random_range(0..out.len())].clone();
            b.detector = ["gd", "yw", "ow", "od"][rng.random_range(0..4)].to_string();
            out.push(b);
            continue;
        }
        let x1 = rng.random_range(0.0..400.0);
        let y1 = rng.random_range(0.0..300.0);
        let w = rng.random_range(4.0..160.0);
        let h = rng.random_range(4.0..160.0);
        let score = (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0;
        let cat = ["person", "dog", "red car"][rng.random_range(0..3)];
        let det = ["gd", "yw", "ow", "od"][rng.random_range(0..4)];
        out.push(DetBox::new(BBox::new(x1, y1, x1 + w, y1 + h), cat, score, det));
    }
    out
}

fn nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<Vec<DetBox>> = (0..1000).map(|_| random_boxes(&mut rng)).collect();
    let start = Instant::now();
    let mut suppressed = 0;
    for (k, boxes) in instances.iter().enumerate() {
        let got = nms_per_category(boxes, NMS_THRESHOLD);
        let want = oracle_nms(boxes, NMS_THRESHOLD);
        ensure(got == want, || format!("instance {k}: {} kept vs oracle {}", got.len(), want.len()))?;
        suppressed += boxes.len() - got.len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < NMS_BUDGET, || format!("took {elapsed:?}"))?;
    ensure(suppressed > 0, || "no box was ever suppressed".into())?;
    Ok(format!("1000 instances, {suppressed} suppressions, {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

/// Connected components of the "within Hamming distance" graph by BFS over
/// all pairs, with the (aesthetic desc, id asc) representative.
fn oracle_clusters(records: &[ImageRecord], k: u32) -> BTreeMap<String, String> {
    let hashes: Vec<u64> = records.iter().map(|r| r.phash.unwrap().0).collect();
    let n = records.len();
    let mut component = vec![usize::MAX; n];
    let mut out = BTreeMap::new();
    for s in 0..n {
        if component[s] != usize::MAX {
            continue;
        }
        let mut members = vec![s];
        component[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if component[v] == usize::MAX && (hashes[u] ^ hashes[v]).count_ones() <= k {
                    component[v] = s;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        let rep = members
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let (ra, rb) = (&records[a], &records[b]);
                ra.aesthetic.unwrap().partial_cmp(&rb.aesthetic.unwrap()).unwrap().then_with(|| rb.id.cmp(&ra.id))
            })
            .unwrap();
        for m in members {
            out.insert(records[m].id.clone(), records[rep].id.clone());
        }
    }
    out
}

fn dedup_oracle() -> Outcome {
    let mut merged_sets = 0;
    for s in 0..500u64 {
        let records = if s % 2 == 0 {
            random_hash_set(s, 10 + (s as usize % 90))
        } else {
            // Links of 6..=11 bits: long chains whose ends are far apart,
            // and (at 11) chains that must not link at all.
            chain_hash_set(s, 1 + (s as usize % 5), 3 + (s as usize % 12), 6 + (s as u32 % 6))
        };
        let got = dedup(&records, DEDUP_HAMMING).map_err(|e| e.to_string())?;
        let want = oracle_clusters(&records, DEDUP_HAMMING);
        ensure(got.clusters == want, || format!("set {s}: cluster map differs from closure"))?;
        let reps: Vec<&str> = records.iter().filter(|r| want[&r.id] == r.id).map(|r| r.id.as_str()).collect();
        let kept: Vec<&str> = got.retained.iter().map(|r| r.id.as_str()).collect();
        ensure(kept == reps, || format!("set {s}: retained {kept:?} vs {reps:?}"))?;
        if kept.len() < records.len() {
            merged_sets += 1;
        }
    }
    ensure(merged_sets > 100, || format!("only {merged_sets} sets had any duplicates"))?;
    Ok(format!("500 sets ({merged_sets} with merges) equal the closure"))
}

// ---------------------------------------------------------------- criterion 3

fn resampling_calibration() -> Outcome {
    let cfg = ResampleConfig::default();
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    let mut worst_iou: f64 = 0.0;
    let mut total = 0;
    for seed in 0..40u64 {
        let (inst, w, h) = dense_instances(seed, 25, 100 + (seed as usize % 15));
        total += inst.len();
        let out = resample_image(&inst, w, h, &format!("dense-{seed:02}"), &cfg);
        let picked: Vec<&Instance> = out.iter().filter(|i| i.status == InstanceStatus::Resampled).collect();
        let retention = picked.len() as f64 / inst.len() as f64;
        lo = lo.min(retention);
        hi = hi.max(retention);
        ensure((RETENTION_RANGE.0..=RETENTION_RANGE.1).contains(&retention), || {
            format!("seed {seed}: retention {retention:.3}")
        })?;
        for a in &picked {
            let layer = a.layer.ok_or("resampled instance without layer")?;
            ensure(layer < MAX_LAYERS, || format!("seed {seed}: layer {layer}"))?;
            for b in &picked {
                if !std::ptr::eq(*a, *b) && a.layer == b.layer {
                    let v = oracle_iou(&a.det.bbox, &b.det.bbox);
                    worst_iou = worst_iou.max(v);
                    ensure(v <= cfg.layer_iou_max, || format!("seed {seed}: layer {layer} pair IoU {v:.3}"))?;
                }
            }
        }
    }
    Ok(format!(
        "40 images, {:.0} boxes avg, retention {lo:.3}..{hi:.3}, max within-layer IoU {worst_iou:.3}",
        total as f64 / 40.0
    ))
}

// ---------------------------------------------------------------- criterion 4

fn alts(spec: &[(&str, f64)]) -> Vec<TokenAlternative> {
    spec.iter().map(|(t, p)| TokenAlternative { token: t.to_string(), logprob: p.ln() }).collect()
}

fn crosscheck_gate() -> Outcome {
    use InstanceStatus::{Indeterminate as I, Rejected as R, Verified as V};
    let cfg = CrosscheckConfig::default();
    type Fixture<'a> = (&'a [(&'a str, f64)], f64, f64, InstanceStatus);
    #[rustfmt::skip]
    let fixtures: [Fixture; 20] = [
        (&[("Yes", 0.8), ("No", 0.1)], 0.8, 0.1, V),
        (&[("yes", 0.3), ("no", 0.1)], 0.3, 0.1, I),
        (&[(" Yes", 0.5), ("yes", 0.2), ("No", 0.1)], 0.7, 0.1, V),
        (&[("YES", 0.4), ("no", 0.4)], 0.4, 0.4, R),
        (&[("Yes.", 0.61), ("\nno", 0.2)], 0.61, 0.2, V),
        (&[("maybe", 0.5), ("yes", 0.3), ("no", 0.1)], 0.3, 0.1, I),
        (&[("Sure", 0.9)], 0.0, 0.0, I),
        (&[], 0.0, 0.0, I),
        (&[("no", 0.7), ("yes", 0.2)], 0.2, 0.7, R),
        (&[("nO", 0.3), ("No", 0.3)], 0.0, 0.6, R),
        (&[("yEs", 0.45), ("no", 0.1)], 0.45, 0.1, V),
        (&[("yes", 0.35), ("no", 0.14)], 0.35, 0.14, I),
        (&[("Yes", 0.37), ("no", 0.14)], 0.37, 0.14, R),
        (&[("yes", 0.74), ("no", 0.25)], 0.74, 0.25, R),
        (&[("yes", 0.76), ("no", 0.24)], 0.76, 0.24, V),
        (&[("Yes!", 0.5), (" YES", 0.3), ("no,", 0.15)], 0.8, 0.15, V),
        (&[("yes", 0.5), ("yes", 0.4), ("no", 0.05)], 0.9, 0.05, V),
        (&[("yeah", 0.6), ("nope", 0.3), ("no", 0.05)], 0.0, 0.05, I),
        (&[("  No  ", 0.55)], 0.0, 0.55, R),
        (&[("Yes", 1.0)], 1.0, 0.0, V),
    ];
    for (k, (spec, y, n, want)) in fixtures.iter().enumerate() {
        let (py, pn) = aggregate_yes_no(&alts(spec), &cfg);
        ensure(close(py, *y, PROB_TOL) && close(pn, *n, PROB_TOL), || {
            format!("fixture {k}: got ({py}, {pn}), want ({y}, {n})")
        })?;
        let got = verdict(py, pn, &cfg);
        ensure(got == *want, || format!("fixture {k}: verdict {got:?}, want {want:?}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mono, mut invariant) = (0, 0);
    for k in 0..10_000 {
        let y: f64 = rng.random_range(0.0..1.0);
        let n: f64 = rng.random_range(0.0..(1.0 - y));
        let base = verdict(y, n, &cfg);
        // More yes never un-verifies; more no never turns a rejection into a
        // verification (it may lift an indeterminate pair over the mass gate).
        let y2 = y + rng.random_range(0.0..=(1.0 - y - n));
        let n2 = n + rng.random_range(0.0..=(1.0 - y - n));
        if base == V {
            ensure(verdict(y2, n, &cfg) == V, || format!("pair {k}: raising yes from {y} to {y2} lost verification"))?;
        }
        if base == R {
            ensure(verdict(y, n2, &cfg) != V, || format!("pair {k}: raising no from {n} to {n2} verified"))?;
        }
        mono += 1;
        // Scaling both masses keeps the decision while both are confident.
        let ratio = if y + n > 0.0 { y / (y + n) } else { 0.0 };
        let c: f64 = rng.random_range(0.1..3.0);
        let (ys, ns) = (y * c, n * c);
        if y + n >= cfg.min_mass && ys + ns >= cfg.min_mass && ys + ns <= 1.0 && (ratio - cfg.keep_ratio).abs() > 1e-9 {
            ensure(verdict(ys, ns, &cfg) == base, || {
                format!("pair {k}: scaling ({y}, {n}) by {c} changed the verdict")
            })?;
            invariant += 1;
        }
    }
    ensure(invariant > 1000, || format!("only {invariant} scalable pairs"))?;
    Ok(format!("20 fixtures, {mono} monotonicity pairs, {invariant} scaling pairs"))
}

// ---------------------------------------------------------------- criterion 5

fn golden_run() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let input = write_corpus(root, 20, 21).map_err(|e| e.to_string())?;
    let server = serve_mocks(MockFixtures::default(), 0).map_err(|e| e.to_string())?;
    let mut scenarios = 0;

    let pipeline = |name: &str| -> Result<Pipeline, String> {
        let toml = mock_config_toml(&root.join(name), &input, &server.url(), 5);
        let cfg = PipelineConfig::from_toml_str(&toml, root, &[]).map_err(|e| e.to_string())?;
        Pipeline::new(cfg).map_err(|e| e.to_string())
    };
    let final_bytes = |p: &Pipeline| std::fs::read(p.cfg.manifest_path(Stage::Finalize)).map_err(|e| e.to_string());
    let opts = |workers: usize| RunOptions { workers: Some(workers), ..Default::default() };
    let run = |p: &Pipeline, from: Stage, to: Stage| p.run(from, to, &opts(4)).map(|_| ()).map_err(|e| e.to_string());

    let golden_p = pipeline("golden")?;
    run(&golden_p, Stage::Curate, Stage::Finalize)?;
    let golden = final_bytes(&golden_p)?;
    let records = golden.iter().filter(|&&b| b == b'\n').count() - 1;
    ensure(records >= 15, || format!("only {records} records reached the final manifest"))?;

    let same = |label: &str, bytes: Vec<u8>| ensure(bytes == golden, || format!("{label}: final manifest differs"));

    // Re-running in place is a no-op; a fresh workdir repeats the bytes.
    run(&golden_p, Stage::Curate, Stage::Finalize)?;
    same("rerun", final_bytes(&golden_p)?)?;
    let again = pipeline("again")?;
    run(&again, Stage::Curate, Stage::Finalize)?;
    same("repeat", final_bytes(&again)?)?;
    scenarios += 2;

    for workers in [1, 4, 16] {
        let p = pipeline(&format!("workers-{workers}"))?;
        p.run(Stage::Curate, Stage::Finalize, &opts(workers)).map_err(|e| e.to_string())?;
        same(&format!("workers={workers}"), final_bytes(&p)?)?;
        scenarios += 1;
    }

    // Stop cleanly after each stage and resume in a new process image.
    for k in 0..Stage::ALL.len() - 1 {
        let name = format!("boundary-{}", Stage::ALL[k]);
        run(&pipeline(&name)?, Stage::Curate, Stage::ALL[k])?;
        let resumed = pipeline(&name)?;
        run(&resumed, Stage::ALL[k + 1], Stage::Finalize)?;
        same(&name, final_bytes(&resumed)?)?;
        scenarios += 1;
    }

    // Crash part-way through each stage, then resume.
    for (k, &stage) in Stage::ALL.iter().enumerate() {
        let name = format!("crash-{stage}");
        let first = pipeline(&name)?;
        if k > 0 {
            run(&first, Stage::Curate, Stage::ALL[k - 1])?;
        }
        let crash = RunOptions { workers: Some(4), crash_after: Some(7), ..Default::default() };
        ensure(first.run_stage(stage, &crash).is_err(), || format!("{name}: crash hook did not fire"))?;
        drop(first);
        let resumed = pipeline(&name)?;
        run(&resumed, stage, Stage::Finalize)?;
        same(&name, final_bytes(&resumed)?)?;
        scenarios += 1;
    }

    let elapsed = start.elapsed();
    ensure(elapsed < GOLDEN_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("20 images -> {records} records, {scenarios} scenarios byte-identical, {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 6

fn fixture_record(
    id: &str,
    (w, h): (u32, u32),
    aesthetic: Option<f64>,
    instances: &[(&str, &str, InstanceStatus)],
) -> ImageRecord {
    let mut r = ImageRecord::new(id, format!("file:///{id}.png"), w, h);
    r.aesthetic = aesthetic;
    r.instances = Some(
        instances
            .iter()
            .enumerate()
            .map(|(k, (cat, det, status))| {
                let x = 10.0 * k as f64;
                let mut i = Instance::candidate(DetBox::new(BBox::new(x, 0.0, x + 8.0, 8.0), *cat, 0.5, *det));
                i.status = *status;
                if *status != InstanceStatus::Candidate {
                    i.layer = Some(0);
                }
                i
            })
            .collect(),
    );
    r
}

fn stats_fixture() -> Vec<ImageRecord> {
    use InstanceStatus::{Indeterminate as I, Rejected as R, Resampled as S, Verified as V};
    let mut failed = fixture_record("i5", (300, 200), Some(6.0), &[("cat", "gd", V)]);
    failed.failed = Some(Failure { stage: Stage::Detect, reason: "boom".into() });
    vec![
        fixture_record("i0", (640, 480), Some(6.0), &[("cat", "gd", V), ("dog", "yw", V), ("cat", "yw", R)]),
        fixture_record("i1", (800, 600), Some(5.5), &[("cat", "gd", V)]),
        fixture_record("i2", (1024, 768), Some(7.0), &[]),
        fixture_record("i3", (640, 640), None, &[("tree", "ow", V), ("tree", "gd", V)]),
        fixture_record("i4", (500, 400), Some(6.5), &[("car", "od", V), ("dog", "od", I)]),
        failed,
        fixture_record("i6", (1280, 720), Some(5.0), &[("bird", "yw", V), ("bird", "yw", V), ("bird", "yw", V)]),
        fixture_record("i7", (720, 1280), Some(6.0), &[("car", "gd", V), ("lamp", "ow", S)]),
        fixture_record("i8", (400, 300), Some(5.0), &[("lamp", "ow", V)]),
        fixture_record("i9", (600, 600), Some(6.0), &[("car", "od", V), ("dog", "gd", V)]),
    ]
}

fn stats_fixtures() -> Outcome {
    const EXACT: f64 = 1e-12;
    let records = stats_fixture();
    let s = dataset_stats_of(&records, StatusFilter::Verified).map_err(|e| e.to_string())?;
    // Nine usable images, 13 verified boxes over cat, dog, tree, car, bird,
    // lamp; per-image category counts 2+1+0+1+1+1+1+1+2.
    ensure((s.images, s.failed, s.instances, s.distinct_categories) == (9, 1, 13, 6), || format!("{s:?}"))?;
    ensure(close(s.avg_category, 10.0 / 9.0, EXACT), || format!("avg_category {}", s.avg_category))?;
    ensure(close(s.avg_box, 13.0 / 9.0, EXACT), || format!("avg_box {}", s.avg_box))?;
    ensure(close(s.avg_width, 6604.0 / 9.0, EXACT), || format!("avg_width {}", s.avg_width))?;
    ensure(close(s.avg_height, 5788.0 / 9.0, EXACT), || format!("avg_height {}", s.avg_height))?;
    ensure(s.avg_aesthetic.is_some_and(|a| close(a, 47.0 / 8.0, EXACT)), || {
        format!("avg_aesthetic {:?}", s.avg_aesthetic)
    })?;
    let all = dataset_stats_of(&records, StatusFilter::All).map_err(|e| e.to_string())?;
    ensure(all.instances == 16 && close(all.avg_box, 16.0 / 9.0, EXACT), || format!("{all:?}"))?;

    // Category -> detectors: cat{gd} dog{gd,yw} tree{gd,ow} car{gd,od}
    // bird{yw} lamp{ow}.
    let d = per_detector_stats_of(&records, StatusFilter::Verified);
    let want = [("gd", 5, 4.0, 1.0), ("od", 2, 1.0, 0.0), ("ow", 2, 2.0, 1.0), ("yw", 4, 2.0, 1.0)];
    ensure(d.len() == want.len(), || format!("detectors {:?}", d.keys().collect::<Vec<_>>()))?;
    for (det, boxes, covered, unique) in want {
        let got = d.get(det).ok_or_else(|| format!("missing detector {det}"))?;
        let ok = got.boxes == boxes
            && close(got.box_contribution, boxes as f64 / 13.0, EXACT)
            && close(got.cat_coverage, covered / 6.0, EXACT)
            && close(got.unique_cat, unique / 6.0, EXACT);
        ensure(ok, || format!("{det}: {got:?}"))?;
    }

    let shares = [("gd", 267), ("yw", 217), ("ow", 280), ("od", 236)];
    let d = per_detector_stats_of(&detector_share_records(&shares, 50), StatusFilter::Verified);
    let mut sum = 0.0;
    for (det, n) in shares {
        let c = d.get(det).ok_or_else(|| format!("missing detector {det}"))?.box_contribution;
        ensure(close(c, n as f64 / 1000.0, SHARE_TOL), || format!("{det}: share {c}"))?;
        sum += c;
    }
    ensure(close(sum, 1.0, SHARE_TOL), || format!("shares sum to {sum}"))?;
    Ok("10-image fixture exact, shares 26.7/21.7/28.0/23.6% recovered".into())
}

// ---------------------------------------------------------------- criterion 7

fn fuzz_description(rng: &mut ChaCha8Rng) -> String {
    const OPENERS: &[&str] = &["This is ", "this is ", "THIS IS ", "This is  this is ", "", "", ""];
    const POSITIVE: &[&str] = &[
        "a black and white photograph of a harbour",
        "An oil painting shows two boats",
        "The dog sleeps beside a red bench",
        "Sunlight falls across the café floor",
        "A man in a blue coat is reading",
        "Nothing about the sky looks unusual",
        "this is a close-up of a leaf",
        "Three kites fly over the dunes",
    ];
    const NEGATIVE: &[&str] = &[
        "There are no visible human activities",
        "There is no text in the image",
        "No other people are present",
        "The background is not visible",
        "The lamp is not switched on",
        "It is shown without any decoration",
    ];
    const ENDS: &[&str] = &[".", "!", "?", "...", ""];
    const GAPS: &[&str] = &[" ", "  ", "\n", "\t ", " \n "];
    let mut s = String::from(OPENERS[rng.random_range(0..OPENERS.len())]);
    for k in 0..rng.random_range(0..6) {
        if k > 0 {
            s.push_str(GAPS[rng.random_range(0..GAPS.len())]);
        }
        let pool = if rng.random_bool(0.35) { NEGATIVE } else { POSITIVE };
        s.push_str(pool[rng.random_range(0..pool.len())]);
        s.push_str(ENDS[rng.random_range(0..ENDS.len())]);
    }
    if rng.random_bool(0.2) {
        s.push_str("  ");
    }
    s
}

fn recaption_contracts() -> Outcome {
    let cfg = RecaptionConfig::default();
    let negative = NegativeFilter::new(&cfg.negative_patterns).map_err(|e| e.to_string())?;
    let pp = |s: &str| postprocess_description(s, &cfg).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..200 {
        let raw = fuzz_description(&mut rng);
        let once = pp(&raw)?;
        ensure(pp(&once)? == once, || format!("case {k}: not idempotent on {raw:?}"))?;
        ensure(!once.to_lowercase().starts_with("this is "), || format!("case {k}: opener kept in {once:?}"))?;
        ensure(!negative.is_negative(&once), || format!("case {k}: negative sentence kept in {once:?}"))?;
    }

    let cleaned = pp("A quiet street at dusk. There are no visible human activities.")?;
    ensure(cleaned == "A quiet street at dusk.", || format!("negative sentence kept: {cleaned:?}"))?;
    ensure(pp("There are no visible human activities")?.is_empty(), || "lone negative sentence kept".into())?;

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let pass1 = s(&["red umbrella", "Black Cat", "oak tree"]);
    let pass2 = s(&["umbrella", "black cat", "cat", "tree", "oak  tree", "lamp"]);
    let merged = merge_categories(&pass1, &pass2, &cfg).merged;
    let want = s(&["red umbrella", "black cat", "oak tree", "umbrella", "cat", "tree", "lamp"]);
    ensure(merged == want, || format!("merged {merged:?}"))?;
    let capped = merge_categories(&pass1, &pass2, &RecaptionConfig { category_cap: 4, ..cfg.clone() }).merged;
    ensure(capped == want[..4], || format!("capped {capped:?}"))?;
    let tight = merge_categories(&pass1, &pass2, &RecaptionConfig { category_cap: 2, ..cfg.clone() }).merged;
    ensure(tight == want[..2], || format!("pass-1 priority lost under cap: {tight:?}"))?;
    Ok("200 fuzzed descriptions idempotent, negative sentence removed, merge order and cap hold".into())
}

// ---------------------------------------------------------------- harness

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("nms matches greedy oracle", nms_oracle),
        ("dedup matches transitive closure", dedup_oracle),
        ("resampling calibration", resampling_calibration),
        ("cross-check gate", crosscheck_gate),
        ("end-to-end golden run", golden_run),
        ("dataset and detector stats", stats_fixtures),
        ("re-caption contracts", recaption_contracts),
    ];
    let mut failures = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", k + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL  {name}: {detail}", k + 1)
            }
        }
    }
    println!("criterion 8: NOT REPRODUCIBLE  full-dataset tables need the source corpus and live model endpoints");
    if failures > 0 {
        std::process::exit(1);
    }
}
