//! Stage execution with per-record resumability.
//!
//! Every stage reads `<workdir>/<previous>.jsonl` (curate reads the source
//! manifest), writes `<workdir>/<stage>.jsonl`, and logs per-record outcomes
//! to `<workdir>/<stage>.status.jsonl`. A record whose consumed fields and
//! stage configuration digest to a value already logged is not recomputed.

pub mod config;
pub mod fetch;
pub mod sidecar;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::crosscheck::{aggregate_yes_no, build_verify_request, crop_region, encode_png, verdict};
use crate::curation::{dedup, passes_filters, phash64, Verdict};
use crate::datamodel::{
    canonical_json, read_manifest, read_manifest_lenient, record_digest, write_manifest, DetBox, Digest128, Failure,
    ImageRecord, Instance, InstanceStatus, ManifestError, PHash, Stage,
};
use crate::detect::{calibrate_thresholds, detect_all, detect_one, fuse, CALIBRATION_FLOOR};
use crate::gateway::Gateway;
use crate::recaption::{
    build_describe_request, build_summarize_requests, merge_categories, parse_category_list, NegativeFilter,
};
use crate::resample::resample_image;

pub use config::{ConfigError, ModelRefs, PipelineConfig};
pub use fetch::{FetchError, FetchedImage, Fetcher};
use sidecar::{Entry, Outcome, SidecarState, SidecarWriter};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("stage {stage} needs {path}, which is missing or incomplete; run the earlier stages first")]
    MissingPrerequisite { stage: Stage, path: PathBuf },
    #[error("input manifest {0} does not exist")]
    MissingInput(PathBuf),
    #[error(
        "stage {stage}: a partial run with a different configuration exists ({path}); \
         rerun with --force to discard it"
    )]
    ConfigMismatch { stage: Stage, path: PathBuf },
    #[error("stage {stage} interrupted after {processed} records")]
    Interrupted { stage: Stage, processed: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Setup(String),
    #[error("invalid stage range: {from} comes after {to}")]
    StageRange { from: Stage, to: Stage },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `cfg.workers`.
    pub workers: Option<usize>,
    /// Discard a partial run made under a different configuration.
    pub force: bool,
    /// Stop each stage after this many newly processed records, leaving a
    /// partial status log behind (crash simulation for tests).
    pub crash_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub processed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub rejected: usize,
    pub carried: usize,
    pub output: usize,
    pub wall_secs: f64,
}

/// What the curate stage removed, for auditing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CurationReport {
    pub rejected: BTreeMap<String, String>,
    pub duplicates: BTreeMap<String, String>,
}

fn delta(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("pipeline types serialize")
}

pub fn apply_delta(record: &ImageRecord, delta: &Map<String, Value>) -> Result<ImageRecord, String> {
    let mut v = to_value(record);
    let obj = v.as_object_mut().expect("record serializes to an object");
    for (k, val) in delta {
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| format!("cannot apply stage output to {}: {e}", record.id))
}

/// A configured pipeline: gateway, fetcher and worker pool.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    gateway: Gateway,
    fetcher: Fetcher,
    negative: NegativeFilter,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.check()?;
        let gateway =
            Gateway::new(cfg.backend_specs(), Some(cfg.cache_dir().join("responses"))).map_err(PipelineError::Setup)?;
        let base = cfg.input.parent().map(Path::to_path_buf).unwrap_or_default();
        let fetcher = Fetcher::new(base, Some(cfg.cache_dir()));
        let negative =
            NegativeFilter::new(&cfg.recaption.negative_patterns).map_err(|e| PipelineError::Setup(e.to_string()))?;
        Ok(Pipeline { cfg, gateway, fetcher, negative })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn input_path(&self, stage: Stage) -> PathBuf {
        match stage.previous() {
            None => self.cfg.input.clone(),
            Some(prev) => self.cfg.manifest_path(prev),
        }
    }

    fn read_input(&self, stage: Stage) -> Result<Vec<ImageRecord>, PipelineError> {
        let path = self.input_path(stage);
        if !path.exists() {
            return Err(match stage {
                Stage::Curate => PipelineError::MissingInput(path),
                _ => PipelineError::MissingPrerequisite { stage, path },
            });
        }
        match stage {
            Stage::Curate => Ok(read_manifest_lenient(&path)?),
            _ => read_manifest(&path).map_err(|e| match e {
                ManifestError::Incomplete { path } => PipelineError::MissingPrerequisite { stage, path },
                other => other.into(),
            }),
        }
    }

    /// Runs `from..=to` in order.
    pub fn run(&self, from: Stage, to: Stage, opts: &RunOptions) -> Result<Vec<StageReport>, PipelineError> {
        if from > to {
            return Err(PipelineError::StageRange { from, to });
        }
        let stages: Vec<Stage> = Stage::ALL[from.index()..=to.index()].to_vec();
        self.cfg.check_backends(&stages)?;
        let workers = opts.workers.unwrap_or(self.cfg.workers).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("rovi-worker-{i}"))
            .build()
            .map_err(|e| PipelineError::Setup(e.to_string()))?;
        stages.into_iter().map(|s| self.run_stage_in(&pool, s, opts)).collect()
    }

    pub fn run_stage(&self, stage: Stage, opts: &RunOptions) -> Result<StageReport, PipelineError> {
        self.run(stage, stage, opts).map(|mut v| v.remove(0))
    }

    fn run_stage_in(
        &self,
        pool: &rayon::ThreadPool,
        stage: Stage,
        opts: &RunOptions,
    ) -> Result<StageReport, PipelineError> {
        let started = Instant::now();
        let input = self.read_input(stage)?;
        let stage_cfg = self.cfg.stage_config(stage);
        let config_digest = Digest128::of_value(&stage_cfg);
        let sidecar_path = self.cfg.sidecar_path(stage);

        let previous =
            SidecarState::load(&sidecar_path).map_err(io_err(format!("reading {}", sidecar_path.display())))?;
        let reuse = match previous {
            Some(s) if s.config_digest == config_digest && s.stage == stage => Some(s),
            Some(s) if !s.complete && !opts.force => {
                return Err(PipelineError::ConfigMismatch { stage, path: sidecar_path });
            }
            Some(_) => {
                tracing::info!(%stage, "stage configuration changed; recomputing all records");
                None
            }
            None => None,
        };
        let mut known: HashMap<String, (Digest128, Outcome)> = reuse.map(|s| s.entries).unwrap_or_default();
        let mut writer = if known.is_empty() {
            SidecarWriter::create(&sidecar_path, stage, config_digest)
        } else {
            SidecarWriter::append(&sidecar_path)
        }
        .map_err(io_err(format!("opening {}", sidecar_path.display())))?;

        let digests: Vec<Option<Digest128>> =
            input.iter().map(|r| r.failed.is_none().then(|| record_digest(r, stage, &stage_cfg))).collect();
        let pending: Vec<usize> = (0..input.len())
            .filter(|&i| match digests[i] {
                Some(d) => known.get(&input[i].id).is_none_or(|(kd, _)| *kd != d),
                None => false,
            })
            .collect();
        let carried = digests.iter().filter(|d| d.is_none()).count();
        let skipped = input.len() - carried - pending.len();

        let workers = pool.current_num_threads();
        let mut processed = 0usize;
        let mut cursor = 0usize;
        while cursor < pending.len() {
            let mut take = (workers * 4).max(1).min(pending.len() - cursor);
            if let Some(limit) = opts.crash_after {
                if processed >= limit {
                    return Err(PipelineError::Interrupted { stage, processed });
                }
                take = take.min(limit - processed);
            }
            let batch = &pending[cursor..cursor + take];
            let outcomes: Vec<Outcome> =
                pool.install(|| batch.par_iter().map(|&i| self.process(stage, &input[i])).collect());
            for (&i, outcome) in batch.iter().zip(outcomes) {
                let entry = Entry {
                    id: input[i].id.clone(),
                    digest: digests[i].expect("pending records have digests"),
                    outcome,
                };
                writer
                    .write(&sidecar::Line::Entry(entry.clone()))
                    .map_err(io_err(format!("writing {}", sidecar_path.display())))?;
                known.insert(entry.id, (entry.digest, entry.outcome));
            }
            processed += take;
            cursor += take;
        }
        if opts.crash_after.is_some_and(|limit| processed >= limit && limit > 0 && !pending.is_empty()) {
            return Err(PipelineError::Interrupted { stage, processed });
        }
        drop(writer);

        let mut output = Vec::with_capacity(input.len());
        let mut entries = Vec::new();
        let (mut failed, mut rejected) = (0, 0);
        let mut report = CurationReport::default();
        for (r, d) in input.iter().zip(&digests) {
            let Some(d) = d else {
                if stage != Stage::Finalize {
                    output.push(r.clone());
                }
                continue;
            };
            let (_, outcome) = known.get(&r.id).expect("every live record has an outcome");
            match outcome {
                Outcome::Done { delta } => output.push(apply_delta(r, delta).map_err(PipelineError::Setup)?),
                Outcome::Failed { reason } => {
                    failed += 1;
                    tracing::warn!(%stage, id = %r.id, reason, "record failed");
                    if stage != Stage::Finalize {
                        let mut f = r.clone();
                        f.failed = Some(Failure { stage, reason: reason.clone() });
                        output.push(f);
                    }
                }
                Outcome::Rejected { reason } => {
                    rejected += 1;
                    report.rejected.insert(r.id.clone(), reason.clone());
                }
            }
            entries.push(Entry { id: r.id.clone(), digest: *d, outcome: outcome.clone() });
        }

        if stage == Stage::Curate {
            output = self.deduplicate(output, &mut report)?;
            let path = self.cfg.workdir.join("curate.report.json");
            std::fs::write(&path, canonical_json(&to_value(&report)) + "\n")
                .map_err(io_err(format!("writing {}", path.display())))?;
        }

        let out_path = self.cfg.manifest_path(stage);
        let tmp = out_path.with_extension(format!("jsonl.tmp{}", std::process::id()));
        write_manifest(&output, &tmp)?;
        std::fs::rename(&tmp, &out_path).map_err(io_err(format!("writing {}", out_path.display())))?;
        sidecar::rewrite_complete(&sidecar_path, stage, config_digest, &entries)
            .map_err(io_err(format!("writing {}", sidecar_path.display())))?;

        let report = StageReport {
            stage,
            processed,
            skipped,
            failed,
            rejected,
            carried,
            output: output.len(),
            wall_secs: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            %stage,
            processed = report.processed,
            skipped = report.skipped,
            failed = report.failed,
            rejected = report.rejected,
            carried = report.carried,
            output = report.output,
            wall_secs = report.wall_secs,
            "stage finished"
        );
        Ok(report)
    }

    fn deduplicate(
        &self,
        records: Vec<ImageRecord>,
        report: &mut CurationReport,
    ) -> Result<Vec<ImageRecord>, PipelineError> {
        let live: Vec<ImageRecord> = records.iter().filter(|r| r.failed.is_none()).cloned().collect();
        let d = dedup(&live, self.cfg.curation.max_hamming).map_err(|e| PipelineError::Setup(e.to_string()))?;
        for (id, rep) in &d.clusters {
            if id != rep {
                report.duplicates.insert(id.clone(), rep.clone());
            }
        }
        Ok(records.into_iter().filter(|r| !report.duplicates.contains_key(&r.id)).collect())
    }

    fn process(&self, stage: Stage, r: &ImageRecord) -> Outcome {
        let result = match stage {
            Stage::Curate => return self.curate(r),
            Stage::Describe => self.describe(r),
            Stage::Summarize => self.summarize(r),
            Stage::Detect => self.detect(r),
            Stage::Resample => Ok(delta(&[(
                "instances",
                to_value(&resample_image(
                    r.instances.as_deref().unwrap_or_default(),
                    r.width,
                    r.height,
                    &r.id,
                    &self.cfg.resample,
                )),
            )])),
            Stage::Crosscheck => self.crosscheck(r),
            Stage::Finalize => Ok(finalize_delta(r)),
        };
        match result {
            Ok(delta) => Outcome::Done { delta },
            Err(reason) => Outcome::Failed { reason },
        }
    }

    fn curate(&self, r: &ImageRecord) -> Outcome {
        let fetched = match self.fetcher.fetch(&r.uri) {
            Ok(f) => f,
            Err(e) => return Outcome::Failed { reason: e.reason() },
        };
        let image = match fetched.decode() {
            Ok(i) => i,
            Err(e) => return Outcome::Failed { reason: e.reason() },
        };
        let (w, h) = image.dimensions();
        if (w, h) != (r.width, r.height) {
            tracing::warn!(id = %r.id, claimed = ?(r.width, r.height), actual = ?(w, h), "manifest size corrected");
        }
        let phash = match phash64(&image) {
            Ok(p) => p,
            Err(e) => return Outcome::Failed { reason: format!("decode: {e}") },
        };
        let aesthetic = match (r.aesthetic, &self.cfg.models.scorer) {
            (Some(a), _) => Some(a),
            (None, Some(scorer)) => match self.gateway.score(scorer, &fetched.bytes) {
                Ok(s) => Some(s),
                Err(e) => return Outcome::Failed { reason: format!("score: {e}") },
            },
            (None, None) => None,
        };
        let mut probe = r.clone();
        probe.width = w;
        probe.height = h;
        probe.aesthetic = aesthetic;
        if let Verdict::Fail(reason) = passes_filters(&probe, &self.cfg.curation) {
            return Outcome::Rejected { reason: to_value(&reason).as_str().unwrap_or_default().to_string() };
        }
        let mut d = delta(&[("width", json!(w)), ("height", json!(h)), ("phash", to_value(&PHash(phash)))]);
        if let Some(a) = aesthetic {
            d.insert("aesthetic".into(), json!(a));
        }
        Outcome::Done { delta: d }
    }

    fn describe(&self, r: &ImageRecord) -> Result<Map<String, Value>, String> {
        let img = self.fetcher.fetch(&r.uri).map_err(|e| e.reason())?;
        let req = build_describe_request(&img.bytes, img.mime(), &self.cfg.templates, &self.cfg.recaption);
        let resp = self.gateway.chat_complete(&self.cfg.models.describe, &req).map_err(|e| format!("describe: {e}"))?;
        Ok(delta(&[("description", json!(self.negative.clean(&resp.content)))]))
    }

    fn summarize(&self, r: &ImageRecord) -> Result<Map<String, Value>, String> {
        let description = r.description.as_deref().unwrap_or_default();
        let rc = &self.cfg.recaption;
        let (pass1, pass2) = build_summarize_requests(description, &r.web_caption, &self.cfg.templates, rc)
            .map_err(|e| format!("summarize: {e}"))?;
        let backend = &self.cfg.models.summarize;
        let out1 = self.gateway.chat_complete(backend, &pass1).map_err(|e| format!("summarize: {e}"))?;
        let phrases = parse_category_list(&out1.content, rc);
        let terms = if phrases.is_empty() {
            Vec::new()
        } else {
            let out2 =
                self.gateway.chat_complete(backend, &pass2.build(&phrases)).map_err(|e| format!("summarize: {e}"))?;
            parse_category_list(&out2.content, rc)
        };
        Ok(delta(&[("categories", to_value(&merge_categories(&phrases, &terms, rc)))]))
    }

    fn detect(&self, r: &ImageRecord) -> Result<Map<String, Value>, String> {
        let has_categories = r.categories.as_ref().is_some_and(|c| !c.merged.is_empty());
        if !has_categories {
            tracing::warn!(id = %r.id, "no categories to detect");
            return Ok(delta(&[("instances", json!([]))]));
        }
        let img = self.fetcher.fetch(&r.uri).map_err(|e| e.reason())?;
        let outcome =
            detect_all(&self.gateway, r, &img.bytes, &self.cfg.detect.detectors).map_err(|e| format!("detect: {e}"))?;
        for w in &outcome.warnings {
            tracing::warn!(id = %r.id, "{w}");
        }
        let instances: Vec<Instance> =
            fuse(&outcome.boxes, self.cfg.detect.nms_threshold).into_iter().map(Instance::candidate).collect();
        Ok(delta(&[("instances", to_value(&instances))]))
    }

    fn crosscheck(&self, r: &ImageRecord) -> Result<Map<String, Value>, String> {
        let mut instances = r.instances.clone().unwrap_or_default();
        if instances.iter().all(|i| i.status != InstanceStatus::Resampled) {
            return Ok(delta(&[("instances", to_value(&instances))]));
        }
        let image = self.fetcher.fetch(&r.uri).and_then(|f| f.decode()).map_err(|e| e.reason())?;
        let cc = &self.cfg.crosscheck;
        for inst in instances.iter_mut().filter(|i| i.status == InstanceStatus::Resampled) {
            let (p_yes, p_no) = match crop_region(&image, &inst.det.bbox, cc) {
                Ok(crop) => {
                    let png = encode_png(&crop).map_err(|e| e.to_string())?;
                    let req = build_verify_request(&inst.det.category, &png, &self.cfg.templates)
                        .map_err(|e| e.to_string())?;
                    let resp = self
                        .gateway
                        .chat_complete(&self.cfg.models.verify, &req)
                        .map_err(|e| format!("crosscheck: {e}"))?;
                    aggregate_yes_no(resp.alternatives.as_deref().unwrap_or_default(), cc)
                }
                Err(e) => {
                    tracing::warn!(id = %r.id, error = %e, "cannot crop instance; marking indeterminate");
                    (0.0, 0.0)
                }
            };
            inst.p_yes = Some(p_yes);
            inst.p_no = Some(p_no);
            inst.transition(verdict(p_yes, p_no, cc))?;
        }
        Ok(delta(&[("instances", to_value(&instances))]))
    }
}

/// Final emission: verified instances only, with the cleaned description as
/// the image's global prompt.
fn finalize_delta(r: &ImageRecord) -> Map<String, Value> {
    let verified: Vec<&Instance> =
        r.instances.iter().flatten().filter(|i| i.status == InstanceStatus::Verified).collect();
    delta(&[("instances", to_value(&verified))])
}

/// Convenience wrapper: build the pipeline and run `from..=to`.
pub fn run_pipeline(
    cfg: PipelineConfig,
    from: Stage,
    to: Stage,
    opts: &RunOptions,
) -> Result<Vec<StageReport>, PipelineError> {
    Pipeline::new(cfg)?.run(from, to, opts)
}

/// Detects every record of `sample` at the calibration floor and returns
/// thresholds balancing each detector's mean box count to `target_mean`.
pub fn calibrate(
    cfg: &PipelineConfig,
    sample: &Path,
    target_mean: f64,
) -> Result<BTreeMap<String, f64>, PipelineError> {
    cfg.check_backends(&[Stage::Detect])?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let records = read_manifest_lenient(sample)?;
    let per_image: Vec<Option<Vec<DetBox>>> = records
        .par_iter()
        .filter(|r| r.failed.is_none() && r.categories.as_ref().is_some_and(|c| !c.merged.is_empty()))
        .map(|r| {
            let img = match pipeline.fetcher.fetch(&r.uri) {
                Ok(i) => i,
                Err(e) => {
                    tracing::warn!(id = %r.id, error = %e, "skipping calibration record");
                    return None;
                }
            };
            let cats = &r.categories.as_ref().expect("filtered above").merged;
            let mut boxes = Vec::new();
            for d in &cfg.detect.detectors {
                match detect_one(&pipeline.gateway, d, &img.bytes, r.width, r.height, cats, CALIBRATION_FLOOR) {
                    Ok(b) => boxes.extend(b),
                    Err(e) => {
                        tracing::warn!(id = %r.id, detector = %d.id, error = %e, "skipping calibration record");
                        return None;
                    }
                }
            }
            Some(boxes)
        })
        .collect();
    let sample: Vec<Vec<DetBox>> = per_image.into_iter().flatten().collect();
    calibrate_thresholds(&sample, &cfg.detect.detectors, target_mean).map_err(|e| PipelineError::Setup(e.to_string()))
}
